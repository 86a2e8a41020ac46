//! Dense ReLU multilayer perceptrons.
//!
//! Hidden layers apply a rectifier, the output layer is linear and produces
//! logits. All dense products go through one kernel whose per-entry
//! arithmetic does not depend on batch composition, so a row of a batched
//! pass is bit-identical to the single-input pass of the same row.

mod backprop;
mod codec;
mod kernel;
mod sgd;

pub use backprop::ParamGrads;
pub use sgd::SgdState;

use rand_distr::{Distribution, StandardNormal};

use self::kernel::gemm_acc;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Rows per block in batched evaluation.
pub(crate) const BLOCK_ROWS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// `weights` transposed (`inputs x outputs`), kept in sync.
    weights_t: Vec<f64>,
}

impl Layer {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::shape("layer weights", inputs * outputs, weights.len()));
        }
        if bias.len() != outputs {
            return Err(Error::shape("layer bias", outputs, bias.len()));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer parameters".into()));
        }
        let mut layer = Layer {
            inputs,
            outputs,
            weights,
            bias,
            weights_t: Vec::new(),
        };
        layer.sync_transpose();
        Ok(layer)
    }

    pub(crate) fn sync_transpose(&mut self) {
        self.weights_t.resize(self.weights.len(), 0.0);
        for o in 0..self.outputs {
            for i in 0..self.inputs {
                self.weights_t[i * self.outputs + o] = self.weights[o * self.inputs + i];
            }
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_row(&self, row: usize) -> &[f64] {
        &self.weights[row * self.inputs..(row + 1) * self.inputs]
    }

    /// `out[b, o] = sum_i x[b, i] w[o, i] + bias[o]` for `batch` rows.
    fn affine(&self, xs: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(batch * self.outputs, 0.0);
        gemm_acc(
            out,
            batch,
            self.outputs,
            self.inputs,
            xs,
            self.inputs,
            1,
            &self.weights_t,
        );
        for row in out.chunks_exact_mut(self.outputs) {
            for (z, b) in row.iter_mut().zip(&self.bias) {
                *z += b;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(Error::shape("chained layer input", pair[0].outputs, pair[1].inputs));
            }
        }
        Ok(Network { layers })
    }

    /// He-initialised network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let layers = layer_sizes
            .windows(2)
            .enumerate()
            .map(|(k, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = rng::stream(seed, Domain::Init, k as u64, 0);
                let weights = (0..fan_in * fan_out)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect::<Vec<f64>>();
                Layer::new(fan_in, fan_out, weights, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.outputs));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub(crate) fn check_input(&self, xs: &[f64], batch: usize) -> Result<()> {
        let d = self.input_dim();
        if xs.len() != batch * d {
            return Err(Error::shape("input length", batch * d, xs.len()));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("network input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(x, 1)
    }

    /// Logits for `batch` row-major inputs, returned row-major.
    pub fn forward_batch(&self, xs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(xs, batch)?;
        let m = self.output_dim();
        let d = self.input_dim();
        let mut logits = Vec::with_capacity(batch * m);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for start in (0..batch).step_by(BLOCK_ROWS) {
            let rows = BLOCK_ROWS.min(batch - start);
            self.forward_block(&xs[start * d..(start + rows) * d], rows, &mut a, &mut b);
            logits.extend_from_slice(&a);
        }
        Ok(logits)
    }

    /// Leaves the block's logits in `out`; `scratch` is reused storage.
    fn forward_block(&self, xs: &[f64], rows: usize, out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        self.layers[0].affine(xs, rows, out);
        for layer in &self.layers[1..] {
            relu(out);
            layer.affine(out, rows, scratch);
            std::mem::swap(out, scratch);
        }
    }
}

/// Probabilities from logits, shifted by the max logit before exponentiating.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[inline]
fn relu(v: &mut [f64]) {
    for x in v {
        // Also maps -0.0 to +0.0 so the derivative mask is `x > 0`.
        *x = if *x > 0.0 { *x } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_net(sizes: &[usize], rng: &mut ChaCha8Rng) -> Network {
        let layers = sizes
            .windows(2)
            .map(|p| {
                let w = (0..p[0] * p[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = (0..p[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
                Layer::new(p[0], p[1], w, b).unwrap()
            })
            .collect();
        Network::new(layers).unwrap()
    }

    /// Straight triple loop, no blocking, no lane splitting.
    fn naive_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.layers().len();
        for (k, l) in net.layers().iter().enumerate() {
            let mut z = vec![0.0; l.outputs()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut s = l.bias()[o];
                for (w, ai) in l.weight_row(o).iter().zip(&a) {
                    s += w * ai;
                }
                *zo = if k + 1 < n { s.max(0.0) } else { s };
            }
            a = z;
        }
        a
    }

    #[test]
    fn init_shapes_and_zero_bias() {
        let net = Network::init(&[784, 256, 10], 0).unwrap();
        assert_eq!(net.layers()[0].weights().len(), 256 * 784);
        assert_eq!(net.layers()[1].weights().len(), 10 * 256);
        assert_eq!(net.layers()[0].bias().len(), 256);
        assert_eq!(net.layers()[1].bias().len(), 10);
        assert_eq!(net.layer_sizes(), vec![784, 256, 10]);

        let small = Network::init(&[2, 2], 5).unwrap();
        assert!(small.layers()[0].bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let a = Network::init(&[400, 300, 10], 3).unwrap();
        let b = Network::init(&[400, 300, 10], 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::init(&[400, 300, 10], 4).unwrap());
        let w = a.layers()[0].weights();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 400.0).abs() < 0.05 * 2.0 / 400.0, "variance {var}");
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(Network::init(&[], 0), Err(Error::Config(_))));
        assert!(matches!(Network::init(&[3], 0), Err(Error::Config(_))));
        assert!(matches!(Network::init(&[3, 0, 2], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let layer = |i, o| Layer::new(i, o, vec![0.0; i * o], vec![0.0; o]).unwrap();
        let net = Network::new(vec![layer(3, 4), layer(4, 2)]).unwrap();
        assert_eq!(net.forward(&[0.3, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Network::new(vec![Layer::new(3, 3, eye, vec![0.0; 3]).unwrap()]).unwrap();
        let x = [0.25, -1.5, 3.0];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let net = random_net(&[3, 4, 2], &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = net.forward(&x).unwrap();
            for (g, e) in got.iter().zip(naive_forward(&net, &x)) {
                assert!((g - e).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batch_rows_equal_single_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = random_net(&[37, 19, 5], &mut rng);
        let batch = 150;
        let xs: Vec<f64> = (0..batch * 37).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = net.forward_batch(&xs, batch).unwrap();
        for b in 0..batch {
            let single = net.forward(&xs[b * 37..(b + 1) * 37]).unwrap();
            assert_eq!(&all[b * 5..(b + 1) * 5], single.as_slice());
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Network::init(&[3, 2], 0).unwrap();
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(Error::Shape { .. })));
        assert!(matches!(net.forward(&[1.0, f64::NAN, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn network_rejects_unchained_layers() {
        let a = Layer::new(3, 4, vec![0.0; 12], vec![0.0; 4]).unwrap();
        let b = Layer::new(5, 2, vec![0.0; 10], vec![0.0; 2]).unwrap();
        assert!(matches!(Network::new(vec![a, b]), Err(Error::Shape { .. })));
        assert!(Layer::new(2, 1, vec![f64::INFINITY, 0.0], vec![0.0]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 5]);
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] == 1.0 && p[1] >= 0.0 && p[1] < 1e-300 && p.iter().all(|v| v.is_finite()));
        let p = softmax(&[1.0, 2.0, 3.0]);
        let oracle = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_65,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relu_rescaling_leaves_logits_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let net = random_net(&[6, 8, 4], &mut rng);
            let alpha: f64 = rng.random_range(0.1..10.0);
            let l0 = &net.layers()[0];
            let l1 = &net.layers()[1];
            let scaled = Network::new(vec![
                Layer::new(6, 8, l0.weights().iter().map(|w| w * alpha).collect(), vec![0.0; 8]).unwrap(),
                Layer::new(8, 4, l1.weights().iter().map(|w| w / alpha).collect(), vec![0.0; 4]).unwrap(),
            ])
            .unwrap();
            let unscaled = Network::new(vec![
                Layer::new(6, 8, l0.weights().to_vec(), vec![0.0; 8]).unwrap(),
                Layer::new(8, 4, l1.weights().to_vec(), vec![0.0; 4]).unwrap(),
            ])
            .unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = unscaled.forward(&x).unwrap();
            let b = scaled.forward(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() <= 1e-10);
            }
            assert_eq!(a, unscaled.forward(&x).unwrap());
        }
    }
}
