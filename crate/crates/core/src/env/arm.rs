//! Planar two-link reacher with damped double-integrator joints and a blind
//! zone on the left: whenever any point of the arm crosses
//! `x < blind_x_threshold`, the observation is the zero vector.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wrap_angle;
use crate::error::{Error, Result};
use crate::ssm::{ControlBound, ControlVec, Environment, EnvironmentSpec, MapDomain, StateVec};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmConfig {
    pub link_lengths: [f64; 2],
    /// Per-step velocity retention.
    pub damping: f64,
    /// Velocity change per unit command (rad/step^2).
    pub control_gain: f64,
    /// Scale of the Gaussian perturbation added to commands.
    pub control_noise: f64,
    pub blind_x_threshold: f64,
    pub n_probe_points: usize,
    /// Fixed target; `None` samples one per rollout.
    pub target: Option<Point>,
    pub success_radius: f64,
    pub bonus: f64,
    /// Observations available everywhere (no blind zone).
    pub easy: bool,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig {
            link_lengths: [0.1, 0.1],
            damping: 0.9,
            control_gain: 0.05,
            control_noise: 0.1,
            blind_x_threshold: -0.02,
            n_probe_points: 20,
            target: None,
            success_radius: 0.05,
            bonus: 100.0,
            easy: false,
        }
    }
}

impl ArmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.link_lengths[0] > 0.0 && self.link_lengths[1] > 0.0) {
            return Err(Error::Config("env.arm: link_lengths must be > 0".into()));
        }
        if self.n_probe_points < 2 {
            return Err(Error::Config("env.arm: n_probe_points must be >= 2".into()));
        }
        if !(self.success_radius > 0.0) {
            return Err(Error::Config("env.arm: success_radius must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) || self.control_noise < 0.0 {
            return Err(Error::Config("env.arm: bad damping or control_noise".into()));
        }
        Ok(())
    }

    /// Uniform over the reachable annulus, restricted to `x > 0.05`.
    pub fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let [l1, l2] = self.link_lengths;
        let (r_min, r_max) = ((l1 - l2).abs(), l1 + l2);
        loop {
            let r = (rng.random::<f64>() * (r_max * r_max - r_min * r_min) + r_min * r_min).sqrt();
            let a = rng.random_range(-PI..PI);
            let p = [r * a.cos(), r * a.sin()];
            if p[0] > 0.05 {
                return p;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmState {
    /// Joint angles in (-pi, pi]; the second is relative to the first link.
    pub angles: [f64; 2],
    /// Joint velocities in rad/step.
    pub velocities: [f64; 2],
    /// Whether the tip is currently within the success radius.
    pub in_bonus: bool,
}

#[derive(Debug, Clone)]
pub struct Arm {
    pub config: ArmConfig,
    pub target: Point,
}

/// Probe points equally spaced along the whole arm (base to tip inclusive).
pub fn forward_kinematics(links: [f64; 2], n_probe: usize, angles: [f64; 2]) -> (Vec<Point>, Point) {
    let total = links[0] + links[1];
    let (a1, a12) = (angles[0], angles[0] + angles[1]);
    let elbow = [links[0] * a1.cos(), links[0] * a1.sin()];
    let probes: Vec<Point> = (0..n_probe)
        .map(|i| {
            let s = total * i as f64 / (n_probe - 1) as f64;
            if s <= links[0] {
                [s * a1.cos(), s * a1.sin()]
            } else {
                let r = s - links[0];
                [elbow[0] + r * a12.cos(), elbow[1] + r * a12.sin()]
            }
        })
        .collect();
    let tip = [elbow[0] + links[1] * a12.cos(), elbow[1] + links[1] * a12.sin()];
    (probes, tip)
}

impl Arm {
    pub fn new(config: ArmConfig, target: Point) -> Result<Self> {
        config.validate()?;
        Ok(Arm { config, target })
    }

    pub fn tip(&self, angles: [f64; 2]) -> Point {
        let [l1, l2] = self.config.link_lengths;
        let a12 = angles[0] + angles[1];
        [
            l1 * angles[0].cos() + l2 * a12.cos(),
            l1 * angles[0].sin() + l2 * a12.sin(),
        ]
    }

    pub fn tip_distance(&self, angles: [f64; 2]) -> f64 {
        let tip = self.tip(angles);
        (tip[0] - self.target[0]).hypot(tip[1] - self.target[1])
    }

    /// Builds a state, deriving the bonus flag from the tip position.
    pub fn state(&self, angles: [f64; 2], velocities: [f64; 2]) -> ArmState {
        let angles = [wrap_angle(angles[0]), wrap_angle(angles[1])];
        ArmState {
            angles,
            velocities,
            in_bonus: self.tip_distance(angles) < self.config.success_radius,
        }
    }

    pub fn is_blind(&self, angles: [f64; 2]) -> bool {
        if self.config.easy {
            return false;
        }
        let (probes, _) = forward_kinematics(
            self.config.link_lengths,
            self.config.n_probe_points,
            angles,
        );
        probes.iter().any(|p| p[0] < self.config.blind_x_threshold)
    }

    fn observe(&self, s: &ArmState) -> [f64; 4] {
        if self.is_blind(s.angles) {
            return [0.0; 4];
        }
        let tip = self.tip(s.angles);
        [
            s.angles[0],
            s.angles[1],
            self.target[0] - tip[0],
            self.target[1] - tip[1],
        ]
    }

    /// Base cost is the tip distance; entering the success radius earns
    /// `-bonus` once and leaving it again pays `+bonus` back.
    pub fn cost_after(&self, next: &ArmState, prev_in_bonus: bool) -> f64 {
        let base = self.tip_distance(next.angles);
        match (prev_in_bonus, next.in_bonus) {
            (false, true) => base - self.config.bonus,
            (true, false) => base + self.config.bonus,
            _ => base,
        }
    }

    fn integrate(&self, s: &ArmState, command: [f64; 2]) -> ArmState {
        let c = &self.config;
        let v = [
            c.damping * s.velocities[0] + c.control_gain * command[0],
            c.damping * s.velocities[1] + c.control_gain * command[1],
        ];
        self.state([s.angles[0] + v[0], s.angles[1] + v[1]], v)
    }

    /// Uniform joint angles at rest, rejecting configurations that are blind
    /// or already inside the success radius.
    pub fn sample_visible_start<R: Rng + ?Sized>(&self, rng: &mut R) -> ArmState {
        loop {
            let angles = [rng.random_range(-PI..PI), rng.random_range(-PI..PI)];
            let s = self.state(angles, [0.0, 0.0]);
            if !self.is_blind(angles) && !s.in_bonus {
                return s;
            }
        }
    }
}

impl Environment for Arm {
    type State = ArmState;
    type Control = [f64; 2];
    type Obs = [f64; 4];

    fn name(&self) -> &'static str {
        "arm"
    }

    fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec {
            state_dim: 4,
            control_dim: 2,
            obs_dim: 4,
            control_bound: ControlBound::PerAxis(1.0),
            discount: 1.0,
        }
    }

    fn clamp_control(&self, u: &[f64; 2]) -> [f64; 2] {
        [u[0].clamp(-1.0, 1.0), u[1].clamp(-1.0, 1.0)]
    }

    fn transition<R: Rng + ?Sized>(&self, s: &ArmState, u: &[f64; 2], rng: &mut R) -> ArmState {
        let u = self.clamp_control(u);
        let sigma = self.config.control_noise;
        let w0: f64 = rng.sample(StandardNormal);
        let w1: f64 = rng.sample(StandardNormal);
        self.integrate(s, [u[0] + sigma * w0, u[1] + sigma * w1])
    }

    fn transition_mean(&self, s: &ArmState, u: &[f64; 2]) -> ArmState {
        self.integrate(s, self.clamp_control(u))
    }

    /// The kick enters through the velocity and carries into the angle of the
    /// same step, as command noise does in `transition`.
    fn perturb<R: Rng + ?Sized>(&self, s: &ArmState, scale: f64, rng: &mut R) -> ArmState {
        let w0 = scale * rng.sample::<f64, _>(StandardNormal);
        let w1 = scale * rng.sample::<f64, _>(StandardNormal);
        self.state(
            [s.angles[0] + w0, s.angles[1] + w1],
            [s.velocities[0] + w0, s.velocities[1] + w1],
        )
    }

    fn emit<R: Rng + ?Sized>(&self, s: &ArmState, _rng: &mut R) -> [f64; 4] {
        self.observe(s)
    }

    fn emission_mean(&self, s: &ArmState) -> [f64; 4] {
        self.observe(s)
    }

    fn emission_scale(&self, _s: &ArmState) -> f64 {
        0.0
    }

    fn obs_sq_distance(&self, y: &[f64; 4], predicted: &[f64; 4]) -> f64 {
        let d0 = wrap_angle(y[0] - predicted[0]);
        let d1 = wrap_angle(y[1] - predicted[1]);
        let (d2, d3) = (y[2] - predicted[2], y[3] - predicted[3]);
        d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3
    }

    fn stage_cost(&self, s: &ArmState, _u: &[f64; 2], next: &ArmState) -> f64 {
        self.cost_after(next, s.in_bonus)
    }

    fn sq_distance(&self, a: &ArmState, b: &ArmState) -> f64 {
        let d0 = wrap_angle(a.angles[0] - b.angles[0]);
        let d1 = wrap_angle(a.angles[1] - b.angles[1]);
        let v0 = a.velocities[0] - b.velocities[0];
        let v1 = a.velocities[1] - b.velocities[1];
        d0 * d0 + d1 * d1 + v0 * v0 + v1 * v1
    }

    /// Circular mean for the angles, arithmetic mean for the velocities.
    fn weighted_mean(&self, states: &[ArmState], weights: &[f64]) -> ArmState {
        let mut sc = [[0.0; 2]; 2];
        let mut v = [0.0; 2];
        for (s, w) in states.iter().zip(weights) {
            for j in 0..2 {
                sc[j][0] += w * s.angles[j].sin();
                sc[j][1] += w * s.angles[j].cos();
                v[j] += w * s.velocities[j];
            }
        }
        self.state([sc[0][0].atan2(sc[0][1]), sc[1][0].atan2(sc[1][1])], v)
    }

    fn is_finite(&self, s: &ArmState) -> bool {
        s.angles.iter().chain(&s.velocities).all(|x| x.is_finite())
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ArmState {
        self.state(
            [rng.random_range(-PI..PI), rng.random_range(-PI..PI)],
            [0.0, 0.0],
        )
    }

    fn is_success(&self, s: &ArmState) -> bool {
        s.in_bonus
    }

    fn state_vec(&self, s: &ArmState) -> StateVec {
        StateVec(vec![s.angles[0], s.angles[1], s.velocities[0], s.velocities[1]])
    }

    fn state_from_vec(&self, v: &StateVec) -> Result<ArmState> {
        match v.0.as_slice() {
            [a0, a1, v0, v1] => Ok(self.state([*a0, *a1], [*v0, *v1])),
            other => Err(Error::Shape {
                what: "arm state",
                expected: 4,
                actual: other.len(),
            }),
        }
    }

    fn control_vec(&self, u: &[f64; 2]) -> ControlVec {
        ControlVec(u.to_vec())
    }

    fn features(&self, s: &ArmState) -> Vec<f64> {
        self.chart_features(s.angles)
    }

    fn feature_dim(&self) -> usize {
        4
    }

    fn chart(&self, s: &ArmState) -> [f64; 2] {
        s.angles
    }

    fn chart_domain(&self) -> MapDomain {
        MapDomain {
            lo: [-PI, -PI],
            hi: [PI, PI],
            periodic: true,
        }
    }

    fn chart_features(&self, p: [f64; 2]) -> Vec<f64> {
        vec![p[0].cos(), p[0].sin(), p[1].cos(), p[1].sin()]
    }
}
