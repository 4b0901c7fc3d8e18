//! Stochastic state-space vocabulary shared by environments, filters and planners,
//! plus the closed-loop rollout driver.

use std::fmt::Debug;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterInit, ParticleBelief, ParticleFilter};
use crate::seed::{self, Stream};

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Vec<f64>);

        impl $name {
            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                $name(v)
            }
        }
    };
}

real_vector!(
    /// Serialized system state `s_t`.
    StateVec
);
real_vector!(
    /// Serialized control `u_t`.
    ControlVec
);
real_vector!(
    /// Serialized observation `y_t`.
    ObsVec
);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlBound {
    /// Euclidean norm of the control vector is at most this value.
    Norm(f64),
    /// Every component lies in `[-b, b]`.
    PerAxis(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub state_dim: usize,
    pub control_dim: usize,
    pub obs_dim: usize,
    pub control_bound: ControlBound,
    /// Task discount, in (0, 1].
    pub discount: f64,
}

impl EnvironmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.control_dim == 0 || self.obs_dim == 0 {
            return Err(Error::Config("environment dimensions must be >= 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!(
                "task discount {} outside (0, 1]",
                self.discount
            )));
        }
        Ok(())
    }
}

/// A rectangular 2D chart of the state space, used for heatmaps and gridded
/// lookups. Periodic axes wrap around.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapDomain {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub periodic: bool,
}

/// A stochastic state-space system `s' = f(s, u, w)`, `y = g(s, v)`, `c(s, u)`.
///
/// States, controls and observations are small `Copy` values so the planner's
/// inner loop never allocates.
pub trait Environment: Send + Sync {
    type State: Copy + Debug + PartialEq + Send + Sync;
    type Control: Copy + Debug + PartialEq + Send + Sync;
    type Obs: Copy + Debug + PartialEq + Send + Sync + AsRef<[f64]>;

    fn name(&self) -> &'static str;
    fn spec(&self) -> EnvironmentSpec;

    fn clamp_control(&self, u: &Self::Control) -> Self::Control;

    /// One stochastic step of the true system. Controls are clamped first.
    fn transition<R: Rng + ?Sized>(
        &self,
        s: &Self::State,
        u: &Self::Control,
        rng: &mut R,
    ) -> Self::State;

    /// Noise-free prediction of the transition.
    fn transition_mean(&self, s: &Self::State, u: &Self::Control) -> Self::State;

    /// Adds Gaussian proposal noise of the given scale (filter proposal).
    fn perturb<R: Rng + ?Sized>(&self, s: &Self::State, scale: f64, rng: &mut R) -> Self::State;

    fn emit<R: Rng + ?Sized>(&self, s: &Self::State, rng: &mut R) -> Self::Obs;

    /// Noise-free emission `g(s, 0)`.
    fn emission_mean(&self, s: &Self::State) -> Self::Obs;

    /// Standard deviation of the true per-axis observation noise at `s`.
    fn emission_scale(&self, s: &Self::State) -> f64;

    /// Squared distance between an observation and a predicted emission.
    fn obs_sq_distance(&self, y: &Self::Obs, predicted: &Self::Obs) -> f64 {
        y.as_ref()
            .iter()
            .zip(predicted.as_ref())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn stage_cost(&self, s: &Self::State, u: &Self::Control, next: &Self::State) -> f64;

    /// Squared distance between two states (used by the tracking error).
    fn sq_distance(&self, a: &Self::State, b: &Self::State) -> f64;

    fn weighted_mean(&self, states: &[Self::State], weights: &[f64]) -> Self::State;

    fn is_finite(&self, s: &Self::State) -> bool;

    /// Broad prior over initial states, used when the filter starts without a
    /// known state.
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    fn is_success(&self, s: &Self::State) -> bool;

    /// Rollout-level success; defaults to reaching success at any step.
    fn is_success_rollout(&self, states: &[Self::State]) -> bool {
        states.iter().any(|s| self.is_success(s))
    }

    fn state_vec(&self, s: &Self::State) -> StateVec;
    fn state_from_vec(&self, v: &StateVec) -> Result<Self::State>;
    fn control_vec(&self, u: &Self::Control) -> ControlVec;
    fn obs_vec(&self, y: &Self::Obs) -> ObsVec {
        ObsVec(y.as_ref().to_vec())
    }

    /// Input features of the trackability network.
    fn features(&self, s: &Self::State) -> Vec<f64>;
    fn feature_dim(&self) -> usize;

    /// Projection onto the 2D chart used for heatmaps and gridded lookups.
    fn chart(&self, s: &Self::State) -> [f64; 2];
    fn chart_domain(&self) -> MapDomain;
    /// Features of the state at a chart point (remaining coordinates at rest).
    fn chart_features(&self, p: [f64; 2]) -> Vec<f64>;
}

/// Produces controls from the current belief.
pub trait Policy<E: Environment> {
    fn act(&mut self, env: &E, belief: &ParticleBelief<E::State>, step: usize) -> E::Control;
}

/// Adapts a closure into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<E, F> Policy<E> for FnPolicy<F>
where
    E: Environment,
    F: FnMut(&ParticleBelief<E::State>, usize) -> E::Control,
{
    fn act(&mut self, _env: &E, belief: &ParticleBelief<E::State>, step: usize) -> E::Control {
        (self.0)(belief, step)
    }
}

/// A closed-loop trajectory in the environment's native types.
#[derive(Debug, Clone)]
pub struct Trajectory<E: Environment> {
    pub states: Vec<E::State>,
    pub controls: Vec<E::Control>,
    pub observations: Vec<E::Obs>,
    /// `errors[t]` is the tracking error after applying `controls[t]` and
    /// assimilating `observations[t + 1]`.
    pub errors: Vec<f64>,
    pub costs: Vec<f64>,
    /// Point estimates of the filter after each update, aligned with `errors`.
    pub estimates: Vec<E::State>,
    /// Number of filter updates that hit the zero-likelihood fallback.
    pub diverged_steps: usize,
    pub seed: u64,
}

impl<E: Environment> Trajectory<E> {
    pub fn to_rollout(&self, env: &E) -> Rollout {
        Rollout {
            states: self.states.iter().map(|s| env.state_vec(s)).collect(),
            controls: self.controls.iter().map(|u| env.control_vec(u)).collect(),
            observations: self.observations.iter().map(|y| env.obs_vec(y)).collect(),
            errors: self.errors.clone(),
            costs: self.costs.clone(),
            seed: self.seed,
        }
    }
}

/// Serialized rollout: one element of the trackability dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
    pub observations: Vec<ObsVec>,
    pub errors: Vec<f64>,
    pub costs: Vec<f64>,
    pub seed: u64,
}

impl Rollout {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        let steps = t.saturating_sub(1);
        if t == 0
            || self.controls.len() != steps
            || self.observations.len() != t
            || self.errors.len() != steps
            || self.costs.len() != steps
        {
            return Err(Error::Config(format!(
                "inconsistent rollout lengths: {} states, {} controls, {} observations, {} errors, {} costs",
                t,
                self.controls.len(),
                self.observations.len(),
                self.errors.len(),
                self.costs.len()
            )));
        }
        let finite = self.states.iter().all(StateVec::is_finite)
            && self.controls.iter().all(ControlVec::is_finite)
            && self.observations.iter().all(ObsVec::is_finite)
            && self.errors.iter().all(|e| e.is_finite())
            && self.costs.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::Config(format!(
                "rollout {} contains non-finite values",
                self.seed
            )));
        }
        Ok(())
    }
}

pub fn write_rollouts<W: Write>(mut out: W, rollouts: &[Rollout]) -> Result<()> {
    for r in rollouts {
        r.validate()?;
        let line = serde_json::to_string(r).map_err(|e| Error::json("serializing rollout", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<rollout stream>", e))?;
    }
    Ok(())
}

pub fn read_rollouts<R: BufRead>(input: R) -> Result<Vec<Rollout>> {
    let mut rollouts = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<rollout stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Rollout = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("rollout line {}", i + 1), e))?;
        r.validate()?;
        rollouts.push(r);
    }
    Ok(rollouts)
}

/// `sum_t gamma^(t-1) costs_t`; zero for an empty sequence.
pub fn discounted_return(costs: &[f64], gamma: f64) -> f64 {
    costs.iter().rev().fold(0.0, |acc, c| c + gamma * acc)
}

/// Runs `policy` in closed loop with a particle filter for `horizon` steps.
///
/// Sub-streams of `seed` drive the environment noise, the filter and the
/// policy independently; the same seed reproduces the rollout bit for bit.
pub fn simulate_rollout<E, P>(
    env: &E,
    policy: &mut P,
    filter: &FilterConfig,
    init: FilterInit,
    init_state: E::State,
    horizon: usize,
    seed: u64,
) -> Result<Trajectory<E>>
where
    E: Environment,
    P: Policy<E>,
{
    if !env.is_finite(&init_state) {
        return Err(Error::NonFiniteState { step: 0 });
    }
    let mut env_rng = seed::stream_rng(seed, Stream::Env);
    let mut filter_rng = seed::stream_rng(seed, Stream::Filter);
    let pf = ParticleFilter::new(filter.clone());

    let mut states = Vec::with_capacity(horizon + 1);
    let mut controls = Vec::with_capacity(horizon);
    let mut observations = Vec::with_capacity(horizon + 1);
    let mut errors = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut estimates = Vec::with_capacity(horizon);
    let mut diverged_steps = 0;

    let mut state = init_state;
    let first_obs = env.emit(&state, &mut env_rng);
    let mut belief = match init {
        FilterInit::Perfect => ParticleBelief::perfect(state, filter.n_run),
        FilterInit::Prior => pf.init_from_prior(env, &first_obs, &mut filter_rng),
    };
    states.push(state);
    observations.push(first_obs);

    for t in 0..horizon {
        let u = env.clamp_control(&policy.act(env, &belief, t));
        let next = env.transition(&state, &u, &mut env_rng);
        if !env.is_finite(&next) {
            return Err(Error::NonFiniteState { step: t + 1 });
        }
        costs.push(env.stage_cost(&state, &u, &next));
        let obs = env.emit(&next, &mut env_rng);
        let stepped = pf.step(env, &belief, &u, &obs, &mut filter_rng);
        if stepped.diverged {
            diverged_steps += 1;
        }
        belief = stepped.belief;
        errors.push(belief.tracking_error(env, &next));
        estimates.push(belief.point_estimate(env));

        controls.push(u);
        observations.push(obs);
        states.push(next);
        state = next;
    }

    Ok(Trajectory {
        states,
        controls,
        observations,
        errors,
        costs,
        estimates,
        diverged_steps,
        seed,
    })
}
