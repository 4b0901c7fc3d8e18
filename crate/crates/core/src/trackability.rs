//! Learning the trackability function `T(s)`, the expected discounted sum of
//! future tracking errors when the filter starts from a perfect carry at `s`.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterInit};
use crate::nn::{adam_step, polyak_update, AdamState, MlpParams, DEFAULT_HIDDEN};
use crate::seed::{self, Stream};
use crate::ssm::{simulate_rollout, Environment, MapDomain, Policy, Rollout, StateVec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackTrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    /// Polyak coefficient of the target network.
    pub eta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Chunk length in transitions; `None` keeps whole rollouts.
    pub chunk_len: Option<usize>,
    /// Drop chunks whose first error is at least this value.
    pub accept_error_max: Option<f64>,
    pub hidden: Vec<usize>,
}

impl TrackTrainConfig {
    pub fn darkzone() -> Self {
        TrackTrainConfig {
            lambda: 0.95,
            gamma: 0.8,
            eta: 0.995,
            lr: 1e-3,
            steps: 5000,
            batch: 512,
            chunk_len: Some(5),
            accept_error_max: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }

    pub fn arm() -> Self {
        TrackTrainConfig {
            gamma: 0.95,
            lr: 1e-5,
            steps: 20000,
            chunk_len: None,
            ..Self::darkzone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ((0.0..=1.0).contains(&self.lambda), "lambda must lie in [0, 1]"),
            (self.gamma > 0.0 && self.gamma < 1.0, "gamma must lie in (0, 1)"),
            (self.eta > 0.0 && self.eta < 1.0, "eta must lie in (0, 1)"),
            (self.lr > 0.0, "lr must be > 0"),
            (self.batch >= 1, "batch must be >= 1"),
            (self.chunk_len != Some(0), "chunk_len must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(format!("train: {msg}")));
            }
        }
        Ok(())
    }
}

/// `T_c` consecutive transitions of a rollout: `T_c + 1` states and the
/// tracking errors after each transition.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutChunk {
    pub states: Vec<StateVec>,
    pub errors: Vec<f64>,
}

/// Runs `n` closed-loop rollouts, each starting from a perfect carry.
/// `make` receives the rollout seed and returns the environment instance,
/// the policy and the initial state.
pub fn collect_dataset<E, P, F>(
    n: usize,
    length: usize,
    filter: &FilterConfig,
    init: FilterInit,
    seed: u64,
    mut make: F,
) -> Result<Vec<Rollout>>
where
    E: Environment,
    P: Policy<E>,
    F: FnMut(u64) -> Result<(E, P, E::State)>,
{
    (0..n)
        .map(|i| {
            let rs = seed::rollout_seed(seed, i);
            let (env, mut policy, start) = make(rs)?;
            let traj = simulate_rollout(&env, &mut policy, filter, init, start, length, rs)?;
            Ok(traj.to_rollout(&env))
        })
        .collect()
}

/// Splits rollouts into non-overlapping chunks, discarding a short tail.
pub fn chunk_rollouts(
    rollouts: &[Rollout],
    chunk_len: Option<usize>,
    accept_error_max: Option<f64>,
) -> Vec<RolloutChunk> {
    let mut out = Vec::new();
    for r in rollouts {
        let len = chunk_len.unwrap_or(r.len());
        if len == 0 {
            continue;
        }
        for c in 0..r.len() / len {
            let start = c * len;
            let errors = r.errors[start..start + len].to_vec();
            if accept_error_max.is_some_and(|m| errors[0] >= m) {
                continue;
            }
            out.push(RolloutChunk {
                states: r.states[start..=start + len].to_vec(),
                errors,
            });
        }
    }
    out
}

/// Truncated lambda-return of `errors` with bootstrap values `bootstrap[k]`
/// after `k + 1` steps:
/// `(1 - lambda) sum_{k < T} lambda^(k-1) G_k + lambda^(T-1) G_T`.
pub fn lambda_return(errors: &[f64], bootstrap: &[f64], lambda: f64, gamma: f64) -> f64 {
    assert!(!errors.is_empty(), "lambda_return needs at least one error");
    assert_eq!(errors.len(), bootstrap.len(), "errors and bootstrap lengths");
    let t = errors.len();
    let mut partial = 0.0;
    let mut discount = 1.0;
    let mut weight = 1.0;
    let mut total = 0.0;
    for k in 0..t {
        partial += discount * errors[k];
        discount *= gamma;
        let g = partial + discount * bootstrap[k];
        if k + 1 == t {
            total += weight * g;
        } else {
            total += (1.0 - lambda) * weight * g;
            weight *= lambda;
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// TD(lambda) regression of the first state of each chunk onto its
/// lambda-return, bootstrapped with a Polyak-averaged target network.
pub fn train(
    chunks: &[RolloutChunk],
    input_dim: usize,
    featurize: impl Fn(&StateVec) -> Result<Vec<f64>>,
    cfg: &TrackTrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if chunks.is_empty() {
        return Err(Error::EmptyData("no training chunks".into()));
    }
    let feature_row = |s: &StateVec| -> Result<Vec<f64>> {
        let f = featurize(s)?;
        if f.len() != input_dim {
            return Err(Error::Shape {
                what: "state features",
                expected: input_dim,
                actual: f.len(),
            });
        }
        Ok(f)
    };

    let mut first = Array2::zeros((chunks.len(), input_dim));
    let mut boot_rows = Vec::new();
    let mut offsets = Vec::with_capacity(chunks.len() + 1);
    offsets.push(0);
    for (i, c) in chunks.iter().enumerate() {
        if c.states.len() != c.errors.len() + 1 || c.errors.is_empty() {
            return Err(Error::Config(format!("chunk {i} has inconsistent lengths")));
        }
        first.row_mut(i).assign(&Array1::from(feature_row(&c.states[0])?));
        for s in &c.states[1..] {
            boot_rows.extend(feature_row(s)?);
        }
        offsets.push(offsets[i] + c.errors.len());
    }
    let boot = Array2::from_shape_vec((offsets[chunks.len()], input_dim), boot_rows)
        .expect("rows collected with input_dim columns");

    let mut rng = seed::stream_rng(seed, Stream::Train);
    let mut online = MlpParams::init(input_dim, &cfg.hidden, &mut seed::stream_rng(seed, Stream::Weights));
    let mut target = online.clone();
    let mut adam = AdamState::new(&online);
    let mut losses = Vec::with_capacity(cfg.steps);

    let b = cfg.batch;
    let mut x = Array2::zeros((b, input_dim));
    let mut y = Array1::zeros(b);
    let mut picks = vec![0usize; b];
    for step in 0..cfg.steps {
        let mut rows = 0;
        for p in picks.iter_mut() {
            *p = rng.random_range(0..chunks.len());
            rows += offsets[*p + 1] - offsets[*p];
        }
        let mut bx = Array2::zeros((rows, input_dim));
        let mut r = 0;
        for (j, &p) in picks.iter().enumerate() {
            x.row_mut(j).assign(&first.row(p));
            for k in offsets[p]..offsets[p + 1] {
                bx.row_mut(r).assign(&boot.row(k));
                r += 1;
            }
        }
        let values = target.forward_batch(bx.view());
        let mut r = 0;
        for (j, &p) in picks.iter().enumerate() {
            let n = offsets[p + 1] - offsets[p];
            let bs = values.as_slice().expect("contiguous")[r..r + n].to_vec();
            y[j] = lambda_return(&chunks[p].errors, &bs, cfg.lambda, cfg.gamma);
            r += n;
        }
        let (loss, grads) = online.loss_and_grad(x.view(), y.view());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam_step(&mut online, &grads, &mut adam, cfg.lr);
        polyak_update(&mut target, &online, cfg.eta);
        losses.push(loss);
        if step % 1000 == 0 {
            log::debug!("train step {step}: loss {loss:.6}");
        }
    }
    Ok(TrainOutcome {
        params: online,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
    })
}

/// Cell centers of a `res x res` grid over the environment's chart.
pub fn chart_centers(domain: &MapDomain, res: usize) -> Vec<[f64; 2]> {
    let h = [
        (domain.hi[0] - domain.lo[0]) / res as f64,
        (domain.hi[1] - domain.lo[1]) / res as f64,
    ];
    let mut out = Vec::with_capacity(res * res);
    for iy in 0..res {
        for ix in 0..res {
            out.push([
                domain.lo[0] + (ix as f64 + 0.5) * h[0],
                domain.lo[1] + (iy as f64 + 0.5) * h[1],
            ]);
        }
    }
    out
}

/// The network on a `res x res` grid over the chart, row-major with rows
/// indexed by the second chart coordinate.
pub fn heatmap<E: Environment>(net: &MlpParams, env: &E, res: usize) -> Result<Vec<f64>> {
    if res < 2 {
        return Err(Error::Config("heatmap resolution must be >= 2".into()));
    }
    if net.input_dim != env.feature_dim() {
        return Err(Error::Shape {
            what: "network input for this environment",
            expected: env.feature_dim(),
            actual: net.input_dim,
        });
    }
    let centers = chart_centers(&env.chart_domain(), res);
    let mut x = Array2::zeros((centers.len(), net.input_dim));
    for (i, c) in centers.iter().enumerate() {
        x.row_mut(i).assign(&Array1::from(env.chart_features(*c)));
    }
    Ok(net.forward_batch(x.view()).to_vec())
}

/// Trackability estimate used by the planner's constraint.
pub trait Trackability<E: Environment>: Sync {
    fn value(&self, env: &E, s: &E::State) -> f64;
}

/// Evaluates the network directly.
pub struct NetTrackability<'a>(pub &'a MlpParams);

impl<E: Environment> Trackability<E> for NetTrackability<'_> {
    fn value(&self, env: &E, s: &E::State) -> f64 {
        self.0.forward(&env.features(s))
    }
}

/// The network tabulated on a chart grid and read back bilinearly; periodic
/// charts wrap around.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackabilityMap {
    pub domain: MapDomain,
    pub res: usize,
    pub values: Vec<f64>,
}

impl TrackabilityMap {
    pub fn new<E: Environment>(net: &MlpParams, env: &E, res: usize) -> Result<Self> {
        Ok(TrackabilityMap {
            domain: env.chart_domain(),
            res,
            values: heatmap(net, env, res)?,
        })
    }

    pub fn value_at(&self, p: [f64; 2]) -> f64 {
        let n = self.res;
        let axis = |a: usize| -> (usize, usize, f64) {
            let h = (self.domain.hi[a] - self.domain.lo[a]) / n as f64;
            let f = (p[a] - self.domain.lo[a]) / h - 0.5;
            if self.domain.periodic {
                let fl = f.floor();
                let i0 = (fl as i64).rem_euclid(n as i64) as usize;
                (i0, (i0 + 1) % n, f - fl)
            } else {
                let i0 = (f.floor().max(0.0) as usize).min(n - 2);
                (i0, i0 + 1, (f - i0 as f64).clamp(0.0, 1.0))
            }
        };
        let (x0, x1, tx) = axis(0);
        let (y0, y1, ty) = axis(1);
        let v = |ix: usize, iy: usize| self.values[iy * n + ix];
        let bottom = v(x0, y0) + tx * (v(x1, y0) - v(x0, y0));
        let top = v(x0, y1) + tx * (v(x1, y1) - v(x0, y1));
        bottom + ty * (top - bottom)
    }
}

impl<E: Environment> Trackability<E> for TrackabilityMap {
    fn value(&self, env: &E, s: &E::State) -> f64 {
        self.value_at(env.chart(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::arm::{Arm, ArmConfig};
    use crate::env::darkzone::{DarkZone, DarkZoneConfig};
    use crate::ssm::{ControlVec, ObsVec};

    fn rollout(errors: Vec<f64>) -> Rollout {
        let t = errors.len();
        Rollout {
            states: (0..=t).map(|i| StateVec(vec![i as f64])).collect(),
            controls: vec![ControlVec(vec![0.0]); t],
            observations: vec![ObsVec(vec![0.0]); t + 1],
            costs: vec![0.0; t],
            errors,
            seed: 0,
        }
    }

    #[test]
    fn chunking_examples() {
        let r = rollout(vec![0.1; 30]);
        let chunks = chunk_rollouts(std::slice::from_ref(&r), Some(5), None);
        assert_eq!(chunks.len(), 6);
        assert_eq!(chunks[1].states.first().unwrap().0, vec![5.0]);
        assert_eq!(chunks[1].states.last().unwrap().0, vec![10.0]);
        assert_eq!(chunk_rollouts(std::slice::from_ref(&r), Some(30), None).len(), 1);
        assert_eq!(chunk_rollouts(std::slice::from_ref(&r), Some(31), None).len(), 0);
        assert_eq!(chunk_rollouts(std::slice::from_ref(&r), None, None).len(), 1);
        assert_eq!(chunk_rollouts(std::slice::from_ref(&r), Some(7), None).len(), 4);

        let mut errs = vec![0.1; 10];
        errs[5] = 1.5;
        let r = rollout(errs);
        assert_eq!(chunk_rollouts(&[r], Some(5), Some(0.99)).len(), 1);
    }

    #[test]
    fn lambda_return_examples() {
        let v = lambda_return(&[1.0, 1.0], &[2.0, 4.0], 0.5, 0.5);
        assert!((v - 2.25).abs() < 1e-15);
        assert_eq!(lambda_return(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.0, 0.9), 1.0 + 0.9 * 4.0);
        let mc = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.9 * 0.9 * 0.9 * 6.0;
        assert!((lambda_return(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 1.0, 0.9) - mc).abs() < 1e-12);
        assert_eq!(lambda_return(&[2.0], &[3.0], 0.7, 0.5), 3.5);
    }

    proptest::proptest! {
        #[test]
        fn lambda_return_weights_sum_to_one(t in 1usize..30, lambda in 0.0f64..=1.0, gamma in 0.01f64..1.0) {
            // With zero errors and unit bootstrap scaled by gamma^-k, every G_k is 1.
            let boot: Vec<f64> = (1..=t).map(|k| gamma.powi(-(k as i32))).collect();
            let v = lambda_return(&vec![0.0; t], &boot, lambda, gamma);
            proptest::prop_assert!((v - 1.0).abs() < 1e-9);
        }

        #[test]
        fn lambda_return_is_monotone(
            errs in proptest::collection::vec(0.0f64..5.0, 1..12),
            idx in 0usize..12,
            bump in 0.0f64..3.0,
            lambda in 0.0f64..=1.0,
            gamma in 0.01f64..1.0,
        ) {
            let boot: Vec<f64> = errs.iter().map(|e| e * 2.0).collect();
            let base = lambda_return(&errs, &boot, lambda, gamma);
            let i = idx % errs.len();
            let mut e2 = errs.clone();
            e2[i] += bump;
            proptest::prop_assert!(lambda_return(&e2, &boot, lambda, gamma) >= base - 1e-12);
            let mut b2 = boot.clone();
            b2[i] += bump;
            proptest::prop_assert!(lambda_return(&errs, &b2, lambda, gamma) >= base - 1e-12);
        }
    }

    /// Value of a Markov chain where the error is paid on arrival.
    fn chain_values(p: &[[f64; 3]; 3], err: &[f64; 3], gamma: f64) -> [f64; 3] {
        let mut v = [0.0; 3];
        for _ in 0..5000 {
            let mut next = [0.0; 3];
            for s in 0..3 {
                next[s] = (0..3).map(|j| p[s][j] * (err[j] + gamma * v[j])).sum();
            }
            v = next;
        }
        v
    }

    #[test]
    fn lambda_return_is_unbiased_with_true_bootstrap() {
        let p = [[0.2, 0.5, 0.3], [0.6, 0.1, 0.3], [0.25, 0.25, 0.5]];
        let err = [0.3, 1.0, 2.0];
        let gamma = 0.8;
        let v = chain_values(&p, &err, gamma);
        let t = 4;
        for lambda in [0.0, 0.3, 0.95, 1.0] {
            for s0 in 0..3 {
                let mut expectation = 0.0;
                for code in 0..3usize.pow(t as u32) {
                    let mut path = Vec::with_capacity(t);
                    let mut c = code;
                    for _ in 0..t {
                        path.push(c % 3);
                        c /= 3;
                    }
                    let mut prob = 1.0;
                    let mut prev = s0;
                    for &s in &path {
                        prob *= p[prev][s];
                        prev = s;
                    }
                    let errors: Vec<f64> = path.iter().map(|&s| err[s]).collect();
                    let boot: Vec<f64> = path.iter().map(|&s| v[s]).collect();
                    expectation += prob * lambda_return(&errors, &boot, lambda, gamma);
                }
                assert!((expectation - v[s0]).abs() < 1e-10, "lambda {lambda}, state {s0}");
            }
        }
    }

    fn tiny_cfg(steps: usize) -> TrackTrainConfig {
        TrackTrainConfig {
            steps,
            batch: 64,
            hidden: vec![16, 16],
            ..TrackTrainConfig::darkzone()
        }
    }

    fn identity(s: &StateVec) -> Result<Vec<f64>> {
        Ok(s.0.clone())
    }

    fn constant_chunks(e0: f64) -> Vec<RolloutChunk> {
        (0..20)
            .map(|_| RolloutChunk {
                states: vec![StateVec(vec![0.5]); 6],
                errors: vec![e0; 5],
            })
            .collect()
    }

    #[test]
    fn constant_errors_reach_geometric_fixed_point() {
        let cfg = tiny_cfg(6000);
        let out = train(&constant_chunks(0.2), 1, identity, &cfg, 1).unwrap();
        let v = out.params.forward(&[0.5]);
        let expected = 0.2 / (1.0 - cfg.gamma);
        assert!((v - expected).abs() < 0.01 * expected, "{v} vs {expected}");
    }

    #[test]
    fn zero_errors_train_to_zero() {
        let out = train(&constant_chunks(0.0), 1, identity, &tiny_cfg(3000), 2).unwrap();
        assert!(out.params.forward(&[0.5]).abs() < 1e-3);
    }

    #[test]
    fn training_is_deterministic() {
        let chunks = constant_chunks(0.3);
        let a = train(&chunks, 1, identity, &tiny_cfg(50), 9).unwrap();
        let b = train(&chunks, 1, identity, &tiny_cfg(50), 9).unwrap();
        assert_eq!(a.params, b.params);
        let c = train(&chunks, 1, identity, &tiny_cfg(50), 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn nan_errors_abort_with_step() {
        let chunks = constant_chunks(f64::NAN);
        match train(&chunks, 1, identity, &tiny_cfg(10), 0) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            train(&[], 1, identity, &tiny_cfg(10), 0),
            Err(Error::EmptyData(_))
        ));
    }

    #[test]
    fn heatmap_shape_and_constant() {
        let env = DarkZone::new(DarkZoneConfig::default()).unwrap();
        let net = MlpParams::constant(2, &[4], 0.4);
        let h = heatmap(&net, &env, 100).unwrap();
        assert_eq!(h.len(), 100 * 100);
        assert!(h.iter().all(|v| *v == 0.4));
        let arm = Arm::new(ArmConfig::default(), [0.1, 0.0]).unwrap();
        assert!(heatmap(&net, &arm, 10).is_err());
    }

    #[test]
    fn map_matches_net_at_centers_and_wraps() {
        let arm = Arm::new(ArmConfig::default(), [0.1, 0.0]).unwrap();
        let net = MlpParams::init(4, &[8], &mut seed::rng(3));
        let map = TrackabilityMap::new(&net, &arm, 64).unwrap();
        let centers = chart_centers(&arm.chart_domain(), 64);
        for (i, c) in centers.iter().enumerate().step_by(97) {
            assert!((map.value_at(*c) - map.values[i]).abs() < 1e-12);
            let f = arm.chart_features(*c);
            assert!((map.values[i] - net.forward(&f)).abs() < 1e-12);
        }
        let pi = std::f64::consts::PI;
        let a = map.value_at([pi - 1e-9, 0.3]);
        let b = map.value_at([-pi + 1e-9, 0.3]);
        assert!((a - b).abs() < 1e-6);
    }
}
