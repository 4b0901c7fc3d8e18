//! A scalar linear-Gaussian system `x' = A x + u + Q w`, `y = x + R v` with a
//! standard-normal prior and cost `x'^2`.

use famp::ssm::{ControlBound, ControlVec, Environment, EnvironmentSpec, MapDomain, StateVec};
use rand::Rng;
use rand_distr::StandardNormal;

pub const KF_A: f64 = 0.9;
pub const KF_Q: f64 = 0.3;
pub const KF_R: f64 = 0.4;

pub struct Linear1d;

impl Environment for Linear1d {
    type State = [f64; 1];
    type Control = [f64; 1];
    type Obs = [f64; 1];

    fn name(&self) -> &'static str {
        "linear1d"
    }
    fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec {
            state_dim: 1,
            control_dim: 1,
            obs_dim: 1,
            control_bound: ControlBound::PerAxis(10.0),
            discount: 1.0,
        }
    }
    fn clamp_control(&self, u: &[f64; 1]) -> [f64; 1] {
        *u
    }
    fn transition<R: Rng + ?Sized>(&self, s: &[f64; 1], u: &[f64; 1], rng: &mut R) -> [f64; 1] {
        let w: f64 = rng.sample(StandardNormal);
        [KF_A * s[0] + u[0] + KF_Q * w]
    }
    fn transition_mean(&self, s: &[f64; 1], u: &[f64; 1]) -> [f64; 1] {
        [KF_A * s[0] + u[0]]
    }
    fn perturb<R: Rng + ?Sized>(&self, s: &[f64; 1], scale: f64, rng: &mut R) -> [f64; 1] {
        let w: f64 = rng.sample(StandardNormal);
        [s[0] + scale * w]
    }
    fn emit<R: Rng + ?Sized>(&self, s: &[f64; 1], rng: &mut R) -> [f64; 1] {
        let v: f64 = rng.sample(StandardNormal);
        [s[0] + KF_R * v]
    }
    fn emission_mean(&self, s: &[f64; 1]) -> [f64; 1] {
        *s
    }
    fn emission_scale(&self, _s: &[f64; 1]) -> f64 {
        KF_R
    }
    fn stage_cost(&self, _s: &[f64; 1], _u: &[f64; 1], next: &[f64; 1]) -> f64 {
        next[0] * next[0]
    }
    fn sq_distance(&self, a: &[f64; 1], b: &[f64; 1]) -> f64 {
        (a[0] - b[0]).powi(2)
    }
    fn weighted_mean(&self, states: &[[f64; 1]], weights: &[f64]) -> [f64; 1] {
        [states.iter().zip(weights).map(|(s, w)| s[0] * w).sum()]
    }
    fn is_finite(&self, s: &[f64; 1]) -> bool {
        s[0].is_finite()
    }
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 1] {
        [rng.sample(StandardNormal)]
    }
    fn is_success(&self, _s: &[f64; 1]) -> bool {
        false
    }
    fn state_vec(&self, s: &[f64; 1]) -> StateVec {
        StateVec(s.to_vec())
    }
    fn state_from_vec(&self, v: &StateVec) -> famp::Result<[f64; 1]> {
        Ok([v.0[0]])
    }
    fn control_vec(&self, u: &[f64; 1]) -> ControlVec {
        ControlVec(u.to_vec())
    }
    fn features(&self, s: &[f64; 1]) -> Vec<f64> {
        s.to_vec()
    }
    fn feature_dim(&self) -> usize {
        1
    }
    fn chart(&self, s: &[f64; 1]) -> [f64; 2] {
        [s[0], 0.0]
    }
    fn chart_domain(&self) -> MapDomain {
        MapDomain {
            lo: [-5.0, -1.0],
            hi: [5.0, 1.0],
            periodic: false,
        }
    }
    fn chart_features(&self, p: [f64; 2]) -> Vec<f64> {
        vec![p[0]]
    }
}
