//! 2D point navigation in `[0, 1]^2` with a circular dark zone of heavy
//! observation noise, wall collisions and a rectangular goal region.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{ControlBound, ControlVec, Environment, EnvironmentSpec, MapDomain, StateVec};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

/// Closed axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: &Point) -> bool {
        p[0] >= self.x[0] && p[0] <= self.x[1] && p[1] >= self.y[0] && p[1] <= self.y[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DarkZoneConfig {
    pub zone_center: Point,
    pub zone_radius: f64,
    pub noise_out: f64,
    pub noise_in: f64,
    pub process_noise: f64,
    pub speed_limit: f64,
    pub goal_region: Rect,
    pub obstacles: Vec<Segment>,
    pub bounce_step: f64,
    pub bounce_eps: f64,
    /// Uniform observation noise `noise_out` everywhere (no dark zone).
    pub easy: bool,
    /// Count a rollout as successful only if its final state is in the goal,
    /// instead of at any step.
    pub success_at_final: bool,
}

pub fn boundary_walls() -> Vec<Segment> {
    let c = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    (0..4)
        .map(|i| Segment {
            a: c[i],
            b: c[(i + 1) % 4],
        })
        .collect()
}

impl Default for DarkZoneConfig {
    fn default() -> Self {
        DarkZoneConfig {
            zone_center: [0.5, 0.5],
            zone_radius: 0.3,
            noise_out: 0.03,
            noise_in: 1.0,
            process_noise: 0.03,
            speed_limit: 0.05,
            goal_region: Rect {
                x: [0.0, 0.1],
                y: [0.4, 0.6],
            },
            obstacles: boundary_walls(),
            bounce_step: 0.01,
            bounce_eps: 1e-4,
            easy: false,
            success_at_final: false,
        }
    }
}

impl DarkZoneConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.goal_region;
        let checks = [
            (self.zone_radius > 0.0, "zone_radius must be > 0"),
            (
                self.noise_out > 0.0 && self.noise_in >= self.noise_out,
                "need noise_in >= noise_out > 0",
            ),
            (self.speed_limit > 0.0, "speed_limit must be > 0"),
            (self.process_noise >= 0.0, "process_noise must be >= 0"),
            (
                g.x[0] <= g.x[1] && g.y[0] <= g.y[1],
                "goal_region must be nonempty",
            ),
            (
                g.x[0] >= 0.0 && g.x[1] <= 1.0 && g.y[0] >= 0.0 && g.y[1] <= 1.0,
                "goal_region must lie inside [0, 1]^2",
            ),
            (self.bounce_step >= 0.0 && self.bounce_eps > 0.0, "bad bounce parameters"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("env.darkzone: {msg}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DarkZone {
    pub config: DarkZoneConfig,
}

fn orient(a: &Point, b: &Point, c: &Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn within_box(a: &Point, b: &Point, p: &Point) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

/// Closed segment intersection test (touching counts).
pub fn segments_intersect(p1: &Point, p2: &Point, q1: &Point, q2: &Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && within_box(q1, q2, p1))
        || (d2 == 0.0 && within_box(q1, q2, p2))
        || (d3 == 0.0 && within_box(p1, p2, q1))
        || (d4 == 0.0 && within_box(p1, p2, q2))
}

impl DarkZone {
    pub fn new(config: DarkZoneConfig) -> Result<Self> {
        config.validate()?;
        Ok(DarkZone { config })
    }

    pub fn obs_noise_scale(&self, s: &Point) -> f64 {
        let c = &self.config;
        if c.easy {
            return c.noise_out;
        }
        if self.zone_distance(s) < c.zone_radius {
            c.noise_in
        } else {
            c.noise_out
        }
    }

    pub fn zone_distance(&self, s: &Point) -> f64 {
        let c = self.config.zone_center;
        (s[0] - c[0]).hypot(s[1] - c[1])
    }

    pub fn in_goal(&self, s: &Point) -> bool {
        self.config.goal_region.contains(s)
    }

    pub fn collides(&self, from: &Point, to: &Point) -> bool {
        self.config
            .obstacles
            .iter()
            .any(|w| segments_intersect(from, to, &w.a, &w.b))
    }

    /// Deterministic part of the transition given the perturbed control.
    pub fn apply_move(&self, s: &Point, moved: &Point) -> Point {
        let target = [s[0] + moved[0], s[1] + moved[1]];
        if !self.collides(s, &target) {
            return target;
        }
        let c = &self.config;
        let k = c.bounce_step / (moved[0].hypot(moved[1]) + c.bounce_eps);
        let bounced = [s[0] - k * moved[0], s[1] - k * moved[1]];
        if self.collides(s, &bounced) {
            // Pinned between two walls closer than the bounce step.
            *s
        } else {
            bounced
        }
    }
}

impl Environment for DarkZone {
    type State = Point;
    type Control = Point;
    type Obs = Point;

    fn name(&self) -> &'static str {
        "darkzone"
    }

    fn spec(&self) -> EnvironmentSpec {
        EnvironmentSpec {
            state_dim: 2,
            control_dim: 2,
            obs_dim: 2,
            control_bound: ControlBound::Norm(self.config.speed_limit),
            discount: 1.0,
        }
    }

    fn clamp_control(&self, u: &Point) -> Point {
        let n = u[0].hypot(u[1]);
        let limit = self.config.speed_limit;
        if n > limit {
            [u[0] * limit / n, u[1] * limit / n]
        } else {
            *u
        }
    }

    fn transition<R: Rng + ?Sized>(&self, s: &Point, u: &Point, rng: &mut R) -> Point {
        let u = self.clamp_control(u);
        let sigma = self.config.process_noise;
        let wx: f64 = rng.sample(StandardNormal);
        let wy: f64 = rng.sample(StandardNormal);
        self.apply_move(s, &[u[0] + sigma * wx, u[1] + sigma * wy])
    }

    fn transition_mean(&self, s: &Point, u: &Point) -> Point {
        self.apply_move(s, &self.clamp_control(u))
    }

    fn perturb<R: Rng + ?Sized>(&self, s: &Point, scale: f64, rng: &mut R) -> Point {
        let wx: f64 = rng.sample(StandardNormal);
        let wy: f64 = rng.sample(StandardNormal);
        [s[0] + scale * wx, s[1] + scale * wy]
    }

    fn emit<R: Rng + ?Sized>(&self, s: &Point, rng: &mut R) -> Point {
        self.perturb(s, self.obs_noise_scale(s), rng)
    }

    fn emission_mean(&self, s: &Point) -> Point {
        *s
    }

    fn emission_scale(&self, s: &Point) -> f64 {
        self.obs_noise_scale(s)
    }

    /// 0 inside the goal region, 1 otherwise, charged on the pre-transition state.
    fn stage_cost(&self, s: &Point, _u: &Point, _next: &Point) -> f64 {
        if self.in_goal(s) {
            0.0
        } else {
            1.0
        }
    }

    fn sq_distance(&self, a: &Point, b: &Point) -> f64 {
        let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
        dx * dx + dy * dy
    }

    fn weighted_mean(&self, states: &[Point], weights: &[f64]) -> Point {
        let mut m = [0.0; 2];
        for (s, w) in states.iter().zip(weights) {
            m[0] += w * s[0];
            m[1] += w * s[1];
        }
        m
    }

    fn is_finite(&self, s: &Point) -> bool {
        s[0].is_finite() && s[1].is_finite()
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        [rng.random::<f64>(), rng.random::<f64>()]
    }

    fn is_success(&self, s: &Point) -> bool {
        self.in_goal(s)
    }

    fn is_success_rollout(&self, states: &[Point]) -> bool {
        if self.config.success_at_final {
            states.last().is_some_and(|s| self.in_goal(s))
        } else {
            states.iter().any(|s| self.in_goal(s))
        }
    }

    fn state_vec(&self, s: &Point) -> StateVec {
        StateVec(s.to_vec())
    }

    fn state_from_vec(&self, v: &StateVec) -> Result<Point> {
        match v.0.as_slice() {
            [x, y] => Ok([*x, *y]),
            other => Err(Error::Shape {
                what: "darkzone state",
                expected: 2,
                actual: other.len(),
            }),
        }
    }

    fn control_vec(&self, u: &Point) -> ControlVec {
        ControlVec(u.to_vec())
    }

    fn features(&self, s: &Point) -> Vec<f64> {
        s.to_vec()
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn chart(&self, s: &Point) -> [f64; 2] {
        *s
    }

    fn chart_domain(&self) -> MapDomain {
        MapDomain {
            lo: [0.0, 0.0],
            hi: [1.0, 1.0],
            periodic: false,
        }
    }

    fn chart_features(&self, p: [f64; 2]) -> Vec<f64> {
        p.to_vec()
    }
}
