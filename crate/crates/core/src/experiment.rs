//! End-to-end pipelines: data collection, trackability training, heatmaps
//! and closed-loop evaluation of vanilla and filter-aware MPC.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{EnvKind, ExperimentConfig};
use crate::env::arm::Arm;
use crate::env::darkzone::DarkZone;
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterInit};
use crate::geodesic::{compute_field, constrained_field, darkzone_masks, DistanceField, GridGeometry};
use crate::nn::MlpParams;
use crate::planner::{ConstraintSpec, MpcPolicy, PlannerConfig, PlanningContext, TerminalCost};
use crate::seed::{self, Stream};
use crate::ssm::{simulate_rollout, Environment, Rollout};
use crate::trackability::{self, chunk_rollouts, Trackability, TrackabilityMap, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vanilla,
    FilterAware,
    Easy,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "filteraware" => Ok(Mode::FilterAware),
            "easy" => Ok(Mode::Easy),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vanilla => "vanilla",
            Mode::FilterAware => "filteraware",
            Mode::Easy => "easy",
        })
    }
}

pub fn darkzone_env(cfg: &ExperimentConfig, easy: bool) -> Result<DarkZone> {
    let mut c = cfg.env.darkzone.clone();
    c.easy |= easy;
    DarkZone::new(c)
}

/// Arm instance for one rollout: the configured target, or one drawn from
/// the rollout's target stream.
pub fn arm_env(cfg: &ExperimentConfig, easy: bool, rollout_seed: u64) -> Result<Arm> {
    let mut c = cfg.env.arm.clone();
    c.easy |= easy;
    let target = match c.target {
        Some(t) => t,
        None => c.sample_target(&mut seed::stream_rng(rollout_seed, Stream::Target)),
    };
    Arm::new(c, target)
}

fn darkzone_geometry(cfg: &ExperimentConfig) -> GridGeometry {
    GridGeometry::unit_square(cfg.grid.field_resolution)
}

/// Unconstrained terminal distance field of the dark-zone task.
pub fn darkzone_field(cfg: &ExperimentConfig) -> Result<DistanceField> {
    let g = darkzone_geometry(cfg);
    let (obstacles, goal) = darkzone_masks(&cfg.env.darkzone, g);
    compute_field(&obstacles, &goal, g)
}

/// Terminal field that treats cells with predicted trackability above
/// `delta` as obstacles.
pub fn darkzone_constrained_field(
    cfg: &ExperimentConfig,
    map: &TrackabilityMap,
    delta: f64,
) -> Result<DistanceField> {
    let g = darkzone_geometry(cfg);
    let (obstacles, goal) = darkzone_masks(&cfg.env.darkzone, g);
    constrained_field(&obstacles, &goal, g, |p| map.value_at(p), delta)
}

fn feature_dim(kind: EnvKind) -> usize {
    match kind {
        EnvKind::Darkzone => 2,
        EnvKind::Arm => 4,
    }
}

/// Vanilla-MPC rollouts from uniformly drawn initial states, each starting
/// with a perfect carry.
pub fn collect(cfg: &ExperimentConfig, n: usize, length: usize) -> Result<Vec<Rollout>> {
    let root = cfg.experiment.seed;
    let planner = PlannerConfig {
        horizon: cfg.collect.horizon,
        replan_interval: cfg.planner.replan_interval.min(cfg.collect.horizon),
        ..cfg.planner.clone()
    };
    match cfg.experiment.env {
        EnvKind::Darkzone => {
            let env = darkzone_env(cfg, false)?;
            let field = darkzone_field(cfg)?;
            let ctx = PlanningContext {
                config: planner,
                constraint: ConstraintSpec::disabled(),
                terminal: Some(&field as &dyn TerminalCost<DarkZone>),
                trackability: None,
            };
            ctx.validate()?;
            trackability::collect_dataset(n, length, &cfg.filter, cfg.collect.filter_init, root, |rs| {
                let init = env.sample_prior(&mut seed::stream_rng(rs, Stream::Init));
                let policy = MpcPolicy::new(ctx.clone(), seed::derive_stream(rs, Stream::Planner));
                Ok((env.clone(), policy, init))
            })
        }
        EnvKind::Arm => {
            let ctx = PlanningContext::<Arm> {
                config: PlannerConfig {
                    use_terminal: false,
                    ..planner
                },
                constraint: ConstraintSpec::disabled(),
                terminal: None,
                trackability: None,
            };
            ctx.validate()?;
            trackability::collect_dataset(n, length, &cfg.filter, cfg.collect.filter_init, root, |rs| {
                let env = arm_env(cfg, false, rs)?;
                let init = env.sample_prior(&mut seed::stream_rng(rs, Stream::Init));
                let policy = MpcPolicy::new(ctx.clone(), seed::derive_stream(rs, Stream::Planner));
                Ok((env, policy, init))
            })
        }
    }
}

/// Chunks the dataset and fits the trackability network.
pub fn train(cfg: &ExperimentConfig, rollouts: &[Rollout]) -> Result<TrainOutcome> {
    let chunks = chunk_rollouts(rollouts, cfg.train.chunk_len, cfg.train.accept_error_max);
    if chunks.is_empty() {
        return Err(Error::EmptyData(format!(
            "{} rollouts produced no chunks of length {:?}",
            rollouts.len(),
            cfg.train.chunk_len
        )));
    }
    let seed = seed::derive_stream(cfg.experiment.seed, Stream::Train);
    match cfg.experiment.env {
        EnvKind::Darkzone => {
            let env = darkzone_env(cfg, false)?;
            trackability::train(
                &chunks,
                feature_dim(EnvKind::Darkzone),
                |s| Ok(env.features(&env.state_from_vec(s)?)),
                &cfg.train,
                seed,
            )
        }
        EnvKind::Arm => {
            let env = Arm::new(cfg.env.arm.clone(), [0.1, 0.0])?;
            trackability::train(
                &chunks,
                feature_dim(EnvKind::Arm),
                |s| Ok(env.features(&env.state_from_vec(s)?)),
                &cfg.train,
                seed,
            )
        }
    }
}

/// Metadata stored alongside trained weights.
pub fn weights_metadata(cfg: &ExperimentConfig, outcome: &TrainOutcome, n_rollouts: usize) -> serde_json::Value {
    serde_json::json!({
        "env": cfg.experiment.env,
        "seed": cfg.experiment.seed,
        "n_rollouts": n_rollouts,
        "final_loss": outcome.final_loss,
        "train": cfg.train,
    })
}

pub fn check_input_dim(cfg: &ExperimentConfig, net: &MlpParams) -> Result<()> {
    let expected = feature_dim(cfg.experiment.env);
    if net.input_dim != expected {
        return Err(Error::Shape {
            what: "trackability network input for this environment",
            expected,
            actual: net.input_dim,
        });
    }
    Ok(())
}

/// `res x res` grid of network values over the environment's chart.
pub fn heatmap(cfg: &ExperimentConfig, net: &MlpParams, res: usize) -> Result<Vec<f64>> {
    check_input_dim(cfg, net)?;
    match cfg.experiment.env {
        EnvKind::Darkzone => trackability::heatmap(net, &darkzone_env(cfg, false)?, res),
        EnvKind::Arm => trackability::heatmap(net, &Arm::new(cfg.env.arm.clone(), [0.1, 0.0])?, res),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    /// Mean of the per-step tracking errors.
    pub mean_tracking_error: f64,
    pub total_cost: f64,
    /// First step at which the success condition held.
    pub first_success_step: Option<usize>,
    /// Fraction of steps without usable observations (arm only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blind_fraction: Option<f64>,
    /// Closest approach to the dark-zone center (dark zone only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_zone_distance: Option<f64>,
    pub filter_divergences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env: EnvKind,
    pub mode: Mode,
    pub seed: u64,
    pub n_rollouts: usize,
    pub length: usize,
    pub success_rate: f64,
    pub mean_tracking_error: f64,
    pub mean_total_cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blind_fraction: Option<f64>,
    /// Policy steps per second of wall-clock planning time.
    pub planner_hz: f64,
    /// Fraction of planning calls where no candidate met the constraint.
    pub infeasible_plan_fraction: f64,
    pub records: Vec<RolloutRecord>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub index: usize,
    pub seed: u64,
    pub success: Vec<bool>,
    pub mean_tracking_error: Vec<f64>,
}

/// One-sided sign test on paired samples: does `a` tend to be below `b`?
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: usize,
    /// Pairs with `a > b`.
    pub losses: usize,
    pub ties: usize,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    let n = wins + losses;
    // Tail in log space: ln C(n, k) - n ln 2.
    let ln_choose = |k: usize| -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    };
    let p_value = if n == 0 {
        1.0
    } else {
        (wins..=n)
            .map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp())
            .sum::<f64>()
            .min(1.0)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Output of an evaluation over several modes on shared rollout seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub modes: Vec<Mode>,
    pub reports: Vec<MetricsReport>,
    pub paired: Vec<PairedRecord>,
    /// Tracking error of each mode against the first one (index 0 is `None`).
    pub sign_tests: Vec<Option<SignTest>>,
}

pub fn pair_reports(reports: Vec<MetricsReport>) -> PairedReport {
    let n = reports.first().map_or(0, |r| r.records.len());
    let paired = (0..n)
        .map(|i| PairedRecord {
            index: i,
            seed: reports[0].records[i].seed,
            success: reports.iter().map(|r| r.records[i].success).collect(),
            mean_tracking_error: reports.iter().map(|r| r.records[i].mean_tracking_error).collect(),
        })
        .collect();
    let errs = |r: &MetricsReport| -> Vec<f64> { r.records.iter().map(|x| x.mean_tracking_error).collect() };
    let sign_tests = reports
        .iter()
        .enumerate()
        .map(|(k, r)| (k > 0).then(|| sign_test(&errs(r), &errs(&reports[0]))))
        .collect();
    PairedReport {
        modes: reports.iter().map(|r| r.mode).collect(),
        reports,
        paired,
        sign_tests,
    }
}

/// Requirements of one evaluation run.
pub struct EvalRequest<'a> {
    pub mode: Mode,
    pub n: usize,
    pub length: usize,
    /// Trackability network, required for the filter-aware mode.
    pub net: Option<&'a MlpParams>,
}

struct Collected {
    records: Vec<RolloutRecord>,
    steps: usize,
    elapsed: Duration,
    plans: usize,
    infeasible: usize,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn first_success<E: Environment>(env: &E, states: &[E::State]) -> Option<usize> {
    states.iter().position(|s| env.is_success(s))
}

/// Runs `req.n` closed-loop rollouts. Rollout `i` uses
/// `rollout_seed(seed, i)` in every mode, so modes are paired.
pub fn evaluate(cfg: &ExperimentConfig, req: &EvalRequest<'_>) -> Result<MetricsReport> {
    let filter_aware = req.mode == Mode::FilterAware;
    let net = match (filter_aware, req.net) {
        (true, None) => {
            return Err(Error::MissingArtifact(
                "filter-aware evaluation needs trained trackability weights".into(),
            ))
        }
        (true, Some(n)) => {
            check_input_dim(cfg, n)?;
            Some(n)
        }
        (false, _) => None,
    };
    let easy = req.mode == Mode::Easy;
    let root = cfg.experiment.seed;
    let collected = match cfg.experiment.env {
        EnvKind::Darkzone => {
            let env = darkzone_env(cfg, easy)?;
            let map = net
                .map(|n| TrackabilityMap::new(n, &env, cfg.grid.map_resolution))
                .transpose()?;
            let field = match &map {
                Some(m) => darkzone_constrained_field(cfg, m, cfg.constraint.delta)?,
                None => darkzone_field(cfg)?,
            };
            let ctx = PlanningContext {
                config: cfg.planner.clone(),
                constraint: if filter_aware {
                    cfg.constraint
                } else {
                    ConstraintSpec::disabled()
                },
                terminal: Some(&field as &dyn TerminalCost<DarkZone>),
                trackability: map.as_ref().map(|m| m as &dyn Trackability<DarkZone>),
            };
            ctx.validate()?;
            run_rollouts(req, root, &cfg.filter, FilterInit::Prior, |_| {
                Ok((env.clone(), cfg.eval.start, ctx.clone()))
            })?
        }
        EnvKind::Arm => {
            let probe = Arm::new(cfg.env.arm.clone(), [0.1, 0.0])?;
            let map = net
                .map(|n| TrackabilityMap::new(n, &probe, cfg.grid.map_resolution))
                .transpose()?;
            let ctx = PlanningContext {
                config: cfg.planner.clone(),
                constraint: if filter_aware {
                    cfg.constraint
                } else {
                    ConstraintSpec::disabled()
                },
                terminal: None,
                trackability: map.as_ref().map(|m| m as &dyn Trackability<Arm>),
            };
            ctx.validate()?;
            run_rollouts(req, root, &cfg.filter, FilterInit::Perfect, |rs| {
                let env = arm_env(cfg, easy, rs)?;
                let init = env.sample_visible_start(&mut seed::stream_rng(rs, Stream::Init));
                Ok((env, init, ctx.clone()))
            })?
        }
    };

    let records = collected.records;
    let n = records.len();
    let successes = records.iter().filter(|r| r.success).count();
    let errors: Vec<f64> = records.iter().map(|r| r.mean_tracking_error).collect();
    let costs: Vec<f64> = records.iter().map(|r| r.total_cost).collect();
    let blind: Vec<f64> = records.iter().filter_map(|r| r.blind_fraction).collect();
    let secs = collected.elapsed.as_secs_f64();
    Ok(MetricsReport {
        env: cfg.experiment.env,
        mode: req.mode,
        seed: root,
        n_rollouts: n,
        length: req.length,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        mean_tracking_error: mean(&errors),
        mean_total_cost: mean(&costs),
        blind_fraction: (!blind.is_empty()).then(|| mean(&blind)),
        planner_hz: if secs > 0.0 { collected.steps as f64 / secs } else { 0.0 },
        infeasible_plan_fraction: if collected.plans == 0 {
            0.0
        } else {
            collected.infeasible as f64 / collected.plans as f64
        },
        records,
        config: cfg.to_json(),
    })
}

/// Per-environment extras recorded for each rollout.
trait RecordExtras: Environment {
    fn blind_fraction(&self, _obs: &[Self::Obs]) -> Option<f64> {
        None
    }
    fn min_zone_distance(&self, _states: &[Self::State]) -> Option<f64> {
        None
    }
}

impl RecordExtras for DarkZone {
    fn min_zone_distance(&self, states: &[[f64; 2]]) -> Option<f64> {
        states.iter().map(|s| self.zone_distance(s)).reduce(f64::min)
    }
}

impl RecordExtras for Arm {
    fn blind_fraction(&self, obs: &[[f64; 4]]) -> Option<f64> {
        let steps = &obs[1..];
        if steps.is_empty() {
            return Some(0.0);
        }
        let blind = steps.iter().filter(|y| y.iter().all(|v| *v == 0.0)).count();
        Some(blind as f64 / steps.len() as f64)
    }
}

fn run_rollouts<'a, E, F>(
    req: &EvalRequest<'_>,
    root: u64,
    filter: &FilterConfig,
    init: FilterInit,
    mut make: F,
) -> Result<Collected>
where
    E: RecordExtras + crate::planner::ProposalSampler + 'a,
    F: FnMut(u64) -> Result<(E, E::State, PlanningContext<'a, E>)>,
{
    let mut out = Collected {
        records: Vec::with_capacity(req.n),
        steps: 0,
        elapsed: Duration::ZERO,
        plans: 0,
        infeasible: 0,
    };
    for i in 0..req.n {
        let rs = seed::rollout_seed(root, i);
        let (env, start, ctx) = make(rs)?;
        let mut policy = MpcPolicy::new(ctx, seed::derive_stream(rs, Stream::Planner));
        let traj = simulate_rollout(&env, &mut policy, filter, init, start, req.length, rs)?;
        out.steps += policy.steps;
        out.elapsed += policy.elapsed;
        out.plans += policy.plans_made;
        out.infeasible += policy.infeasible_plans;
        out.records.push(RolloutRecord {
            index: i,
            seed: rs,
            success: env.is_success_rollout(&traj.states),
            mean_tracking_error: mean(&traj.errors),
            total_cost: traj.costs.iter().sum(),
            first_success_step: first_success(&env, &traj.states),
            blind_fraction: env.blind_fraction(&traj.observations),
            min_zone_distance: env.min_zone_distance(&traj.states),
            filter_divergences: traj.diverged_steps,
        });
        log::debug!(
            "{} rollout {i}: success {}, error {:.4}",
            req.mode,
            out.records[i].success,
            out.records[i].mean_tracking_error
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        let t = sign_test(&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]);
        assert_eq!((t.wins, t.losses, t.ties), (3, 0, 0));
        assert!((t.p_value - 0.125).abs() < 1e-15);
        let t = sign_test(&[1.0, 3.0, 2.0, 0.0], &[2.0, 2.0, 2.0, 1.0]);
        assert_eq!((t.wins, t.losses, t.ties), (2, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-15);
        assert_eq!(sign_test(&[1.0], &[1.0]).p_value, 1.0);
        // 15 of 20: sum_{k>=15} C(20,k) / 2^20 = 21700 / 1048576.
        let a: Vec<f64> = (0..20).map(|i| if i < 15 { 0.0 } else { 2.0 }).collect();
        let t = sign_test(&a, &[1.0; 20]);
        assert!((t.p_value - 21700.0 / 1048576.0).abs() < 1e-12);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("filteraware".parse::<Mode>().unwrap(), Mode::FilterAware);
        assert!("other".parse::<Mode>().is_err());
        assert_eq!(Mode::Easy.to_string(), "easy");
    }

    #[test]
    fn filter_aware_needs_weights() {
        let cfg = ExperimentConfig::defaults(EnvKind::Darkzone);
        let req = EvalRequest {
            mode: Mode::FilterAware,
            n: 1,
            length: 2,
            net: None,
        };
        assert!(matches!(evaluate(&cfg, &req), Err(Error::MissingArtifact(_))));
        let wrong = MlpParams::zeros(4, &[2]);
        let req = EvalRequest {
            net: Some(&wrong),
            ..req
        };
        assert!(matches!(evaluate(&cfg, &req), Err(Error::Shape { .. })));
    }

    #[test]
    fn small_evaluation_is_consistent() {
        let mut cfg = ExperimentConfig::defaults(EnvKind::Darkzone);
        cfg.planner.n_candidates = 10;
        cfg.planner.mc_samples = 3;
        let req = EvalRequest {
            mode: Mode::Vanilla,
            n: 3,
            length: 8,
            net: None,
        };
        let a = evaluate(&cfg, &req).unwrap();
        let b = evaluate(&cfg, &req).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 3);
        let s = a.records.iter().filter(|r| r.success).count();
        assert_eq!(a.success_rate, s as f64 / 3.0);
    }

    #[test]
    fn collect_shapes() {
        let mut cfg = ExperimentConfig::defaults(EnvKind::Arm);
        cfg.planner.n_candidates = 6;
        let rollouts = collect(&cfg, 2, 7).unwrap();
        assert_eq!(rollouts.len(), 2);
        assert!(rollouts.iter().all(|r| r.states.len() == 8 && r.states[0].dim() == 4));
    }
}
