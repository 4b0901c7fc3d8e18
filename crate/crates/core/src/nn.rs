//! Fully connected ReLU network with a scalar output, mean-squared-error
//! backpropagation, Adam and Polyak averaging. Everything is `f64`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden layer widths used by default.
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Parameters of `input_dim -> hidden... -> 1`. Gradients and Adam moments
/// reuse the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input_dim: usize,
    pub layers: Vec<Layer>,
}

fn layer_dims(input_dim: usize, hidden: &[usize]) -> Vec<(usize, usize)> {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    sizes.windows(2).map(|w| (w[1], w[0])).collect()
}

impl MlpParams {
    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let layers = layer_dims(input_dim, hidden)
            .into_iter()
            .map(|(out, inp)| {
                let limit = (6.0 / inp as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((out, inp), || {
                        rng.random_range(-limit..limit)
                    }),
                    bias: Array1::zeros(out),
                }
            })
            .collect();
        MlpParams { input_dim, layers }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let layers = layer_dims(input_dim, hidden)
            .into_iter()
            .map(|(out, inp)| Layer {
                weights: Array2::zeros((out, inp)),
                bias: Array1::zeros(out),
            })
            .collect();
        MlpParams { input_dim, layers }
    }

    /// Zero weights with output bias `b`: evaluates to `b` everywhere.
    pub fn constant(input_dim: usize, hidden: &[usize], b: f64) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        p.layers.last_mut().expect("at least one layer").bias[0] = b;
        p
    }

    /// `[input_dim, hidden..., 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.layers.iter().map(|l| l.bias.len()))
            .collect()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        let s = self.layer_sizes();
        s[1..s.len() - 1].to_vec()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut it = flat.iter();
        for l in &mut self.layers {
            for (w, v) in l.weights.iter_mut().zip(&mut it) {
                *w = *v;
            }
            for (b, v) in l.bias.iter_mut().zip(&mut it) {
                *b = *v;
            }
        }
    }

    /// Panics if `x` has the wrong length.
    pub fn forward(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.input_dim, "network input dimension");
        let mut a = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            a = l.weights.dot(&a) + &l.bias;
            if i < last {
                a.mapv_inplace(relu);
            }
        }
        a[0]
    }

    pub fn try_forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_dim {
            return Err(Error::Shape {
                what: "network input",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(self.forward(x))
    }

    /// Row-wise forward pass over a `batch x input_dim` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array1<f64> {
        assert_eq!(x.ncols(), self.input_dim, "network input dimension");
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            a = a.dot(&l.weights.t()) + &l.bias;
            if i < last {
                a.mapv_inplace(relu);
            }
        }
        a.index_axis_move(Axis(1), 0)
    }

    /// Mean squared error over the batch and its exact gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> (f64, MlpParams) {
        assert_eq!(x.nrows(), y.len(), "batch size");
        assert!(x.nrows() > 0, "empty batch");
        assert_eq!(x.ncols(), self.input_dim, "network input dimension");
        let n = x.nrows() as f64;
        let last = self.layers.len() - 1;

        // activations[i] is the input to layer i.
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let z = a.dot(&l.weights.t()) + &l.bias;
            activations.push(a);
            a = if i < last { z.mapv(relu) } else { z };
        }
        let residual = &a.index_axis(Axis(1), 0) - &y;
        let loss = residual.dot(&residual) / n;

        let mut delta = (residual * (2.0 / n)).insert_axis(Axis(1));
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &activations[i];
            grads.push(Layer {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                // `input` is relu(z) for hidden layers; its support is the ReLU mask.
                Zip::from(&mut back).and(input).for_each(|d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        (
            loss,
            MlpParams {
                input_dim: self.input_dim,
                layers: grads,
            },
        )
    }

    pub fn grad(&self, x: ArrayView2<f64>, y: ArrayView1<f64>) -> MlpParams {
        self.loss_and_grad(x, y).1
    }

    fn zip_layers(&mut self, other: &MlpParams, mut f: impl FnMut(&mut f64, f64)) {
        assert_eq!(self.layer_sizes(), other.layer_sizes(), "parameter shapes");
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            Zip::from(&mut l.weights).and(&o.weights).for_each(|a, &b| f(a, b));
            Zip::from(&mut l.bias).and(&o.bias).for_each(|a, &b| f(a, b));
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(like: &MlpParams) -> Self {
        AdamState {
            m: MlpParams::zeros(like.input_dim, &like.hidden_sizes()),
            v: MlpParams::zeros(like.input_dim, &like.hidden_sizes()),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    state.m.zip_layers(grads, |m, g| *m = b1 * *m + (1.0 - b1) * g);
    state.v.zip_layers(grads, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
    for ((p, m), v) in params
        .layers
        .iter_mut()
        .zip(&state.m.layers)
        .zip(&state.v.layers)
    {
        Zip::from(&mut p.weights)
            .and(&m.weights)
            .and(&v.weights)
            .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        Zip::from(&mut p.bias)
            .and(&m.bias)
            .and(&v.bias)
            .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
    }
}

/// `target <- eta * target + (1 - eta) * online`.
pub fn polyak_update(target: &mut MlpParams, online: &MlpParams, eta: f64) {
    target.zip_layers(online, |t, o| *t = eta * *t + (1.0 - eta) * o);
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    input_dim: usize,
    layer_sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    metadata: serde_json::Value,
}

impl MlpParams {
    pub fn to_json(&self, metadata: serde_json::Value) -> Result<String> {
        let file = WeightsFile {
            input_dim: self.input_dim,
            layer_sizes: self.layer_sizes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
            metadata,
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("serializing weights", e))
    }

    /// Parses a weights file, returning the parameters and the metadata object.
    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        let file: WeightsFile =
            serde_json::from_str(text).map_err(|e| Error::json("parsing weights", e))?;
        let sizes = &file.layer_sizes;
        if sizes.len() < 2 || sizes[0] != file.input_dim || *sizes.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "weights: layer_sizes {sizes:?} inconsistent with input_dim {}",
                file.input_dim
            )));
        }
        if file.layers.len() != sizes.len() - 1 {
            return Err(Error::Shape {
                what: "weights layer count",
                expected: sizes.len() - 1,
                actual: file.layers.len(),
            });
        }
        let mut layers = Vec::with_capacity(file.layers.len());
        for (l, w) in file.layers.into_iter().zip(sizes.windows(2)) {
            let (inp, out) = (w[0], w[1]);
            if l.weights.len() != out * inp || l.bias.len() != out {
                return Err(Error::Shape {
                    what: "weights layer",
                    expected: out * inp + out,
                    actual: l.weights.len() + l.bias.len(),
                });
            }
            layers.push(Layer {
                weights: Array2::from_shape_vec((out, inp), l.weights)
                    .expect("length checked above"),
                bias: Array1::from(l.bias),
            });
        }
        let params = MlpParams {
            input_dim: file.input_dim,
            layers,
        };
        if !params.is_finite() {
            return Err(Error::Config("weights contain non-finite values".into()));
        }
        Ok((params, file.metadata))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut text = self.to_json(metadata)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingArtifact(format!(
                    "weights file {} not found",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> (Array2<f64>, Array1<f64>) {
        let x = Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn constant_net_outputs_bias() {
        let net = MlpParams::constant(3, &[4, 4], 0.7);
        assert_eq!(net.forward(&[1.0, -2.0, 5.0]), 0.7);
        assert_eq!(net.forward(&[0.0, 0.0, 0.0]), 0.7);
    }

    #[test]
    fn hand_built_unit_net() {
        // relu(w x + c) v + d with w = 1.5, c = -1, v = 2, d = 0.25.
        let mut net = MlpParams::zeros(1, &[1]);
        net.layers[0].weights[[0, 0]] = 1.5;
        net.layers[0].bias[0] = -1.0;
        net.layers[1].weights[[0, 0]] = 2.0;
        net.layers[1].bias[0] = 0.25;
        assert_eq!(net.forward(&[2.0]), 4.25);
        assert_eq!(net.forward(&[0.0]), 0.25);
    }

    #[test]
    fn forward_batch_matches_forward() {
        let mut rng = seed::rng(2);
        let net = MlpParams::init(3, &[8, 5], &mut rng);
        let (x, _) = random_batch(&mut rng, 10, 3);
        let batch = net.forward_batch(x.view());
        for (row, b) in x.rows().into_iter().zip(batch.iter()) {
            assert!((net.forward(row.as_slice().unwrap()) - b).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_within_one_activation_region() {
        let mut rng = seed::rng(9);
        let net = MlpParams::init(2, &[6, 6], &mut rng);
        let x1 = [0.3, -0.2];
        let x2 = [0.3 + 1e-4, -0.2 + 2e-4];
        let mid = [0.5 * (x1[0] + x2[0]), 0.5 * (x1[1] + x2[1])];
        let lhs = net.forward(&mid);
        let rhs = 0.5 * net.forward(&x1) + 0.5 * net.forward(&x2);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_dimension_is_an_error() {
        let net = MlpParams::zeros(2, &[3]);
        assert!(net.try_forward(&[1.0]).is_err());
    }

    #[test]
    fn zero_gradient_at_optimum() {
        let mut rng = seed::rng(3);
        let net = MlpParams::init(2, &[5, 5], &mut rng);
        let (x, _) = random_batch(&mut rng, 16, 2);
        let y = net.forward_batch(x.view());
        let (loss, g) = net.loss_and_grad(x.view(), y.view());
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_scales_with_residual() {
        let mut rng = seed::rng(4);
        let net = MlpParams::init(2, &[5, 5], &mut rng);
        let (x, y) = random_batch(&mut rng, 16, 2);
        let out = net.forward_batch(x.view());
        let y2 = &out - &((&out - &y) * 2.0);
        let g1 = net.grad(x.view(), y.view()).to_flat();
        let g2 = net.grad(x.view(), y2.view()).to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(5);
        let mut net = MlpParams::init(3, &[7, 6], &mut rng);
        let (x, y) = random_batch(&mut rng, 12, 3);
        let g = net.grad(x.view(), y.view()).to_flat();
        let base = net.to_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + h;
            net.set_flat(&p);
            let up = net.loss_and_grad(x.view(), y.view()).0;
            p[i] = base[i] - h;
            net.set_flat(&p);
            let down = net.loss_and_grad(x.view(), y.view()).0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * g[i].abs(), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn adam_first_step() {
        let mut p = MlpParams::zeros(2, &[3]);
        let mut g = MlpParams::zeros(2, &[3]);
        g.set_flat(&vec![1.0; g.num_params()]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3);
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!(p.to_flat().iter().all(|v| (v - expected).abs() < 1e-18));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_noop() {
        let mut rng = seed::rng(6);
        let mut p = MlpParams::init(2, &[3], &mut rng);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &MlpParams::zeros(2, &[3]), &mut st, 1e-3);
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut rng = seed::rng(7);
        let p0 = MlpParams::init(2, &[3], &mut rng);
        let (x, y) = random_batch(&mut rng, 8, 2);
        let g = p0.grad(x.view(), y.view());
        let run = || {
            let mut p = p0.clone();
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &g, &mut st, 1e-2);
            adam_step(&mut p, &g, &mut st, 1e-2);
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn polyak_examples() {
        let mut t = MlpParams::zeros(1, &[2]);
        let mut o = MlpParams::zeros(1, &[2]);
        o.set_flat(&vec![1.0; o.num_params()]);
        polyak_update(&mut t, &o, 0.995);
        assert!(t.to_flat().iter().all(|v| (v - 0.005).abs() < 1e-15));

        let same = o.clone();
        let mut t2 = o.clone();
        polyak_update(&mut t2, &same, 0.995);
        assert_eq!(t2, same);

        let mut t3 = MlpParams::zeros(1, &[2]);
        let gap0 = 1.0;
        for k in 1..=50 {
            polyak_update(&mut t3, &o, 0.9);
            let gap = 1.0 - t3.to_flat()[0];
            assert!((gap - gap0 * 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = seed::rng(8);
        let net = MlpParams::init(4, &[16, 16], &mut rng);
        let meta = serde_json::json!({"env": "arm"});
        let (back, m) = MlpParams::from_json(&net.to_json(meta.clone()).unwrap()).unwrap();
        assert_eq!(back, net);
        assert_eq!(m, meta);
        let x = [0.1, -0.4, 0.9, 0.3];
        assert_eq!(back.forward(&x).to_bits(), net.forward(&x).to_bits());
    }

    #[test]
    fn json_rejects_bad_shapes() {
        let text = r#"{"input_dim":2,"layer_sizes":[2,1],"layers":[{"weights":[1.0],"bias":[0.0]}]}"#;
        assert!(MlpParams::from_json(text).is_err());
        let text = r#"{"input_dim":1,"layer_sizes":[1,1],"layers":[{"weights":[1.0],"bias":[0.5]}]}"#;
        let (net, _) = MlpParams::from_json(text).unwrap();
        assert_eq!(net.forward(&[2.0]), 2.5);
    }

    #[test]
    fn fits_a_sine() {
        let mut rng = seed::rng(10);
        let n = 256;
        let x = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
        let y = x.column(0).mapv(f64::sin);
        let mut net = MlpParams::init(1, &DEFAULT_HIDDEN, &mut rng);
        let mut st = AdamState::new(&net);
        let mut loss = f64::INFINITY;
        for _ in 0..5000 {
            let (l, g) = net.loss_and_grad(x.view(), y.view());
            loss = l;
            adam_step(&mut net, &g, &mut st, 1e-3);
        }
        assert!(loss < 1e-3, "final loss {loss}");
    }
}
