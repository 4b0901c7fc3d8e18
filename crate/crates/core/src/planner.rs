//! Random-shooting model predictive control, optionally with a chance
//! constraint on predicted trackability.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::arm::Arm;
use crate::env::darkzone::DarkZone;
use crate::error::{Error, Result};
use crate::filter::ParticleBelief;
use crate::geodesic::DistanceField;
use crate::seed;
use crate::ssm::{Environment, Policy};
use crate::trackability::{lambda_return, Trackability};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub n_candidates: usize,
    pub horizon: usize,
    pub mc_samples: usize,
    pub replan_interval: usize,
    pub lambda_obj: f64,
    pub gamma_obj: f64,
    pub use_terminal: bool,
}

impl PlannerConfig {
    pub fn darkzone() -> Self {
        PlannerConfig {
            n_candidates: 100,
            horizon: 10,
            mc_samples: 50,
            replan_interval: 1,
            lambda_obj: 1.0,
            gamma_obj: 1.0,
            use_terminal: true,
        }
    }

    /// Shorter horizon used while collecting trackability data.
    pub fn darkzone_collect() -> Self {
        PlannerConfig {
            horizon: 5,
            ..Self::darkzone()
        }
    }

    pub fn arm() -> Self {
        PlannerConfig {
            n_candidates: 300,
            horizon: 22,
            mc_samples: 5,
            replan_interval: 3,
            lambda_obj: 1.0,
            gamma_obj: 1.0,
            use_terminal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.n_candidates >= 1, "n_candidates must be >= 1"),
            (self.horizon >= 1, "horizon must be >= 1"),
            (self.mc_samples >= 1, "mc_samples must be >= 1"),
            (
                self.replan_interval >= 1 && self.replan_interval <= self.horizon,
                "replan_interval must lie in [1, horizon]",
            ),
            ((0.0..=1.0).contains(&self.lambda_obj), "lambda_obj must lie in [0, 1]"),
            (self.gamma_obj > 0.0 && self.gamma_obj <= 1.0, "gamma_obj must lie in (0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("planner: {msg}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    /// Largest tolerated trackability value.
    pub delta: f64,
    /// Minimum fraction of Monte Carlo samples that must satisfy the constraint.
    pub min_satisfaction: f64,
    pub enabled: bool,
}

impl ConstraintSpec {
    pub fn darkzone() -> Self {
        ConstraintSpec {
            delta: 0.6,
            min_satisfaction: 1.0,
            enabled: true,
        }
    }

    pub fn arm() -> Self {
        ConstraintSpec {
            delta: 0.2,
            ..Self::darkzone()
        }
    }

    pub fn disabled() -> Self {
        ConstraintSpec {
            enabled: false,
            ..Self::darkzone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_satisfaction > 0.0 && self.min_satisfaction <= 1.0) {
            return Err(Error::Config("constraint: min_satisfaction must lie in (0, 1]".into()));
        }
        if self.delta.is_nan() {
            return Err(Error::Config("constraint: delta is NaN".into()));
        }
        Ok(())
    }
}

/// An evaluated open-loop control sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan<C> {
    pub controls: Vec<C>,
    /// Mean lambda-return of stage and terminal costs over the samples.
    pub objective: f64,
    /// Fraction of samples whose predicted trackability stays within bounds.
    pub constraint_satisfaction: f64,
    /// Mean positive excess of trackability over the threshold.
    pub violation: f64,
}

/// Cost-to-go estimate used at the planning horizon.
pub trait TerminalCost<E: Environment>: Sync {
    fn value(&self, env: &E, s: &E::State) -> f64;
}

impl<E: Environment> TerminalCost<E> for DistanceField {
    fn value(&self, env: &E, s: &E::State) -> f64 {
        self.query(env.chart(s))
    }
}

/// Candidate control sequences for random shooting.
pub trait ProposalSampler: Environment {
    fn propose<R: Rng + ?Sized>(&self, n: usize, horizon: usize, rng: &mut R) -> Vec<Vec<Self::Control>>;
}

impl ProposalSampler for DarkZone {
    /// One random velocity held for the whole horizon.
    fn propose<R: Rng + ?Sized>(&self, n: usize, horizon: usize, rng: &mut R) -> Vec<Vec<[f64; 2]>> {
        (0..n)
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                let speed = rng.random_range(0.0..=self.config.speed_limit);
                vec![[speed * a.cos(), speed * a.sin()]; horizon]
            })
            .collect()
    }
}

fn random_window<R: Rng + ?Sized>(horizon: usize, rng: &mut R) -> (usize, usize) {
    let start = rng.random_range(0..horizon);
    let len = rng.random_range(1..=horizon - start);
    (start, start + len)
}

impl ProposalSampler for Arm {
    /// Each joint gets a constant command over a random window and zero
    /// elsewhere. The first third of the candidates share one window across
    /// joints, the second third share window and command, the rest draw
    /// everything independently.
    fn propose<R: Rng + ?Sized>(&self, n: usize, horizon: usize, rng: &mut R) -> Vec<Vec<[f64; 2]>> {
        let third = n / 3;
        (0..n)
            .map(|i| {
                let mut plan = vec![[0.0; 2]; horizon];
                let (windows, commands) = if i < third {
                    let w = random_window(horizon, rng);
                    ([w, w], [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
                } else if i < 2 * third {
                    let w = random_window(horizon, rng);
                    let c = rng.random_range(-1.0..=1.0);
                    ([w, w], [c, c])
                } else {
                    let w0 = random_window(horizon, rng);
                    let w1 = random_window(horizon, rng);
                    ([w0, w1], [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
                };
                for j in 0..2 {
                    for u in &mut plan[windows[j].0..windows[j].1] {
                        u[j] = commands[j];
                    }
                }
                plan
            })
            .collect()
    }
}

/// What the planner optimizes against. Vanilla MPC has no constraint and an
/// unconstrained terminal field; the filter-aware variant adds both.
pub struct PlanningContext<'a, E: Environment> {
    pub config: PlannerConfig,
    pub constraint: ConstraintSpec,
    pub terminal: Option<&'a dyn TerminalCost<E>>,
    pub trackability: Option<&'a dyn Trackability<E>>,
}

impl<E: Environment> Clone for PlanningContext<'_, E> {
    fn clone(&self) -> Self {
        PlanningContext {
            config: self.config.clone(),
            constraint: self.constraint,
            terminal: self.terminal,
            trackability: self.trackability,
        }
    }
}

impl<'a, E: Environment> PlanningContext<'a, E> {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.constraint.validate()?;
        if self.config.use_terminal && self.terminal.is_none() {
            return Err(Error::Config("planner: use_terminal requires a terminal cost".into()));
        }
        if self.constraint.enabled && self.trackability.is_none() {
            return Err(Error::Config(
                "planner: an enabled constraint requires a trackability estimate".into(),
            ));
        }
        Ok(())
    }

    fn constraint_active(&self) -> Option<&'a dyn Trackability<E>> {
        if self.constraint.enabled {
            self.trackability
        } else {
            None
        }
    }
}

/// Monte Carlo evaluation of one control sequence. Sample `j` draws its
/// initial state from `belief` and its transition noise from
/// `derive(plan_seed, j)`.
pub fn evaluate_plan<E: Environment>(
    env: &E,
    controls: Vec<E::Control>,
    belief: &ParticleBelief<E::State>,
    sampler: &crate::filter::WeightedSampler,
    ctx: &PlanningContext<'_, E>,
    plan_seed: u64,
) -> Plan<E::Control> {
    let cfg = &ctx.config;
    let k = controls.len();
    let track = ctx.constraint_active();
    let delta = ctx.constraint.delta;
    let terminal = if cfg.use_terminal { ctx.terminal } else { None };
    let every_step = cfg.lambda_obj < 1.0;

    let mut costs = vec![0.0; k];
    let mut boot = vec![0.0; k];
    let mut objective = 0.0;
    let mut satisfied = 0usize;
    let mut excess = 0.0;
    for j in 0..cfg.mc_samples {
        let mut rng = seed::rng(seed::derive(plan_seed, j as u64));
        let mut s = belief.particles[sampler.sample(&mut rng)];
        let mut ok = true;
        for t in 0..k {
            let next = env.transition(&s, &controls[t], &mut rng);
            costs[t] = env.stage_cost(&s, &controls[t], &next);
            if let Some(term) = terminal {
                if every_step || t + 1 == k {
                    boot[t] = term.value(env, &next);
                }
            }
            if let Some(tr) = track {
                let v = tr.value(env, &next);
                if v > delta {
                    ok = false;
                    excess += v - delta;
                }
            }
            s = next;
        }
        if ok {
            satisfied += 1;
        }
        objective += lambda_return(&costs, &boot, cfg.lambda_obj, cfg.gamma_obj);
    }
    let m = cfg.mc_samples as f64;
    let (constraint_satisfaction, violation) = if track.is_some() {
        (satisfied as f64 / m, excess / (m * k as f64))
    } else {
        (1.0, 0.0)
    };
    Plan {
        controls,
        objective: objective / m,
        constraint_satisfaction,
        violation,
    }
}

/// Index of the best plan: the lowest objective among plans meeting the
/// satisfaction level, otherwise the lowest violation (then objective, then
/// index).
pub fn select_plan<C>(plans: &[Plan<C>], spec: &ConstraintSpec) -> usize {
    assert!(!plans.is_empty(), "select_plan needs at least one plan");
    let feasible = |p: &Plan<C>| !spec.enabled || p.constraint_satisfaction >= spec.min_satisfaction;
    let by_objective = plans
        .iter()
        .enumerate()
        .filter(|(_, p)| feasible(p))
        .min_by(|(i, a), (j, b)| a.objective.total_cmp(&b.objective).then(i.cmp(j)));
    if let Some((i, _)) = by_objective {
        return i;
    }
    plans
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            a.violation
                .total_cmp(&b.violation)
                .then(a.objective.total_cmp(&b.objective))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
        .expect("nonempty")
}

/// Propose, evaluate and select from `belief`. Returns the first
/// `replan_interval` controls of the winner and the winning plan.
pub fn mpc_policy_step<E: ProposalSampler>(
    env: &E,
    belief: &ParticleBelief<E::State>,
    ctx: &PlanningContext<'_, E>,
    step_seed: u64,
) -> (Vec<E::Control>, Plan<E::Control>) {
    let cfg = &ctx.config;
    let mut rng = seed::rng(seed::derive(step_seed, u64::MAX));
    let candidates = env.propose(cfg.n_candidates, cfg.horizon, &mut rng);
    let sampler = belief.sampler();
    let plans: Vec<Plan<E::Control>> = candidates
        .into_iter()
        .enumerate()
        .map(|(i, c)| evaluate_plan(env, c, belief, &sampler, ctx, seed::derive(step_seed, i as u64)))
        .collect();
    let best = select_plan(&plans, &ctx.constraint);
    let plan = plans.into_iter().nth(best).expect("index from select_plan");
    let controls = plan.controls[..cfg.replan_interval].to_vec();
    (controls, plan)
}

/// Receding-horizon controller that replans every `replan_interval` steps.
pub struct MpcPolicy<'a, E: Environment> {
    pub ctx: PlanningContext<'a, E>,
    seed: u64,
    queue: VecDeque<E::Control>,
    pub plans_made: usize,
    pub infeasible_plans: usize,
    pub steps: usize,
    pub elapsed: Duration,
}

impl<'a, E: Environment> MpcPolicy<'a, E> {
    pub fn new(ctx: PlanningContext<'a, E>, seed: u64) -> Self {
        MpcPolicy {
            ctx,
            seed,
            queue: VecDeque::new(),
            plans_made: 0,
            infeasible_plans: 0,
            steps: 0,
            elapsed: Duration::ZERO,
        }
    }

    /// Policy steps per second of wall-clock time spent in `act`.
    pub fn hz(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.steps as f64 / secs
        } else {
            f64::NAN
        }
    }
}

impl<E: ProposalSampler> Policy<E> for MpcPolicy<'_, E> {
    fn act(&mut self, env: &E, belief: &ParticleBelief<E::State>, step: usize) -> E::Control {
        let start = Instant::now();
        if self.queue.is_empty() {
            let (controls, plan) = mpc_policy_step(env, belief, &self.ctx, seed::derive(self.seed, step as u64));
            if self.ctx.constraint.enabled
                && plan.constraint_satisfaction < self.ctx.constraint.min_satisfaction
            {
                self.infeasible_plans += 1;
            }
            self.plans_made += 1;
            self.queue.extend(controls);
        }
        let u = self.queue.pop_front().expect("queue refilled above");
        self.elapsed += start.elapsed();
        self.steps += 1;
        u
    }
}
