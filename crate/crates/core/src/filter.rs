//! Bootstrap particle filter: the carry `c_t` is a weighted particle set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ssm::Environment;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Particles drawn from the prior when the initial state is unknown.
    pub n_init: usize,
    /// Particles carried after the first update.
    pub n_run: usize,
    /// Scale of the Gaussian proposal around the predicted transition mean.
    pub proposal_scale: f64,
    /// Fixed emission-model scale; `None` uses the environment's true
    /// (possibly state-dependent) observation noise.
    pub emission_scale: Option<f64>,
    /// Resample when the effective sample size drops below this fraction of `n_run`.
    pub resample_threshold: f64,
}

impl FilterConfig {
    pub fn darkzone() -> Self {
        FilterConfig {
            n_init: 512,
            n_run: 128,
            proposal_scale: 0.03,
            emission_scale: None,
            resample_threshold: 0.5,
        }
    }

    pub fn arm() -> Self {
        FilterConfig {
            n_init: 512,
            n_run: 100,
            proposal_scale: 0.005,
            emission_scale: Some(0.001),
            resample_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let scale_ok = self.emission_scale.is_none_or(|s| s > 0.0);
        if self.n_init == 0 || self.n_run == 0 {
            return Err(crate::Error::Config("filter particle counts must be >= 1".into()));
        }
        if !(self.proposal_scale > 0.0) || !scale_ok {
            return Err(crate::Error::Config("filter scales must be > 0".into()));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(crate::Error::Config(
                "resample_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// How the carry is initialized at the start of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterInit {
    /// The initial state is known: every particle sits on it.
    Perfect,
    /// Draw `n_init` particles from the environment prior and weight them by
    /// the first observation.
    Prior,
}

/// Weighted particle set representing `q(s_t | c_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBelief<S> {
    pub particles: Vec<S>,
    pub weights: Vec<f64>,
}

impl<S: Copy> ParticleBelief<S> {
    /// The perfect carry: `n` copies of `state` with uniform weights.
    pub fn perfect(state: S, n: usize) -> Self {
        assert!(n >= 1, "a belief needs at least one particle");
        ParticleBelief {
            particles: vec![state; n],
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn uniform(particles: Vec<S>) -> Self {
        let n = particles.len();
        assert!(n >= 1, "a belief needs at least one particle");
        ParticleBelief {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Weighted mean of the particles.
    pub fn point_estimate<E: Environment<State = S>>(&self, env: &E) -> S {
        env.weighted_mean(&self.particles, &self.weights)
    }

    /// `sum_i w_i * |s_i - s_true|^2`.
    pub fn tracking_error<E: Environment<State = S>>(&self, env: &E, true_state: &S) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| w * env.sq_distance(p, true_state))
            .sum()
    }

    pub fn sampler(&self) -> WeightedSampler {
        WeightedSampler::new(&self.weights)
    }
}

/// Draws particle indices proportionally to their weights.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    cdf: Vec<f64>,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        WeightedSampler { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("empty sampler");
        let u = rng.random::<f64>() * total;
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Systematic (low-variance) resampling. `offset` is a uniform draw in `[0, 1)`.
pub fn systematic_resample(weights: &[f64], n: usize, offset: f64) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut cumulative = weights[0];
    for j in 0..n {
        let target = (offset + j as f64) * step;
        while cumulative <= target && i + 1 < weights.len() {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

/// Result of one filter update.
#[derive(Debug, Clone)]
pub struct Stepped<S> {
    pub belief: ParticleBelief<S>,
    /// Every particle had numerically zero likelihood; weights were reset to uniform.
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct ParticleFilter {
    pub config: FilterConfig,
}

impl ParticleFilter {
    pub fn new(config: FilterConfig) -> Self {
        ParticleFilter { config }
    }

    /// Gaussian log-density of `obs` given the particle state.
    pub fn log_likelihood<E: Environment>(&self, env: &E, obs: &E::Obs, state: &E::State) -> f64 {
        let scale = self
            .config
            .emission_scale
            .unwrap_or_else(|| env.emission_scale(state));
        let predicted = env.emission_mean(state);
        let sq = env.obs_sq_distance(obs, &predicted);
        if scale <= 0.0 {
            return if sq == 0.0 { 0.0 } else { f64::NEG_INFINITY };
        }
        let d = obs.as_ref().len() as f64;
        -0.5 * sq / (scale * scale) - d * scale.ln() - 0.5 * d * LN_2PI
    }

    /// Reweights `particles` (with prior log-weights) by `obs` and normalizes.
    /// Returns the normalized weights and whether the fallback triggered.
    fn reweight<E: Environment>(
        &self,
        env: &E,
        particles: &[E::State],
        prior: &[f64],
        obs: &E::Obs,
    ) -> (Vec<f64>, bool) {
        let log_w: Vec<f64> = particles
            .iter()
            .zip(prior)
            .map(|(p, w)| w.ln() + self.log_likelihood(env, obs, p))
            .collect();
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // All weighted likelihoods underflow to zero in f64.
        if !(max >= f64::MIN_POSITIVE.ln()) {
            log::debug!("particle filter diverged: all likelihoods are numerically zero");
            let n = particles.len();
            return (vec![1.0 / n as f64; n], true);
        }
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        (w, false)
    }

    fn resample<S: Copy, R: Rng + ?Sized>(
        &self,
        particles: &[S],
        weights: &[f64],
        rng: &mut R,
    ) -> ParticleBelief<S> {
        let n = self.config.n_run;
        let idx = systematic_resample(weights, n, rng.random::<f64>());
        ParticleBelief::uniform(idx.into_iter().map(|i| particles[i]).collect())
    }

    /// Initial carry from the environment prior and the first observation.
    pub fn init_from_prior<E: Environment, R: Rng + ?Sized>(
        &self,
        env: &E,
        obs: &E::Obs,
        rng: &mut R,
    ) -> ParticleBelief<E::State> {
        let n = self.config.n_init;
        let particles: Vec<E::State> = (0..n).map(|_| env.sample_prior(rng)).collect();
        let prior = vec![1.0 / n as f64; n];
        let (weights, _) = self.reweight(env, &particles, &prior, obs);
        self.resample(&particles, &weights, rng)
    }

    /// Propagate, weight by `obs`, normalize, and resample when the effective
    /// sample size falls below the threshold (or the particle count differs
    /// from `n_run`).
    pub fn step<E: Environment, R: Rng + ?Sized>(
        &self,
        env: &E,
        belief: &ParticleBelief<E::State>,
        control: &E::Control,
        obs: &E::Obs,
        rng: &mut R,
    ) -> Stepped<E::State> {
        let particles: Vec<E::State> = belief
            .particles
            .iter()
            .map(|p| {
                let mean = env.transition_mean(p, control);
                env.perturb(&mean, self.config.proposal_scale, rng)
            })
            .collect();
        let (weights, diverged) = self.reweight(env, &particles, &belief.weights, obs);
        let proposed = ParticleBelief { particles, weights };
        let n_run = self.config.n_run;
        let belief = if proposed.len() != n_run
            || proposed.effective_sample_size() < self.config.resample_threshold * n_run as f64
        {
            self.resample(&proposed.particles, &proposed.weights, rng)
        } else {
            proposed
        };
        Stepped { belief, diverged }
    }
}
