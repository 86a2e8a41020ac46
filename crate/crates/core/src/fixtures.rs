//! Small hand-built classifiers with known geometry, used as test oracles.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, Network};
use crate::rng::{self, Domain};

/// One-dimensional two-class classifier predicting class 1 iff `x > 0`
/// (logits `[0, x]`; `x = 0` is a tie and therefore a violation for class 1).
pub fn threshold_classifier() -> Network {
    linear_classifier(&[0.0, 1.0], &[0.0, 0.0], 1).expect("valid fixture")
}

/// `logits = W x + b` with `W` given row-major, `classes x dim`.
pub fn linear_classifier(weights: &[f64], bias: &[f64], dim: usize) -> Result<Network> {
    let layer = Layer::new(dim, bias.len(), weights.to_vec(), bias.to_vec())?;
    Network::new(vec![layer])
}

/// A network that outputs logit `scale` for `class` and 0 elsewhere,
/// whatever the input.
pub fn constant_classifier(dim: usize, classes: usize, class: usize, scale: f64) -> Result<Network> {
    let mut bias = vec![0.0; classes];
    bias[class] = scale;
    linear_classifier(&vec![0.0; dim * classes], &bias, dim)
}

/// Single-point dataset.
pub fn single_point(x: &[f64], y: usize, classes: usize) -> Result<Dataset> {
    Dataset::new(x.to_vec(), vec![y], x.len(), classes)
}

/// Network with weights uniform in `[-1, 1)` and biases uniform in
/// `[-0.5, 0.5)`, for property tests that need arbitrary nets.
pub fn random_network(layer_sizes: &[usize], seed: u64) -> Result<Network> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config("a network needs at least two layer sizes".into()));
    }
    let layers = layer_sizes
        .windows(2)
        .enumerate()
        .map(|(k, p)| {
            let mut rng = rng::stream(seed, Domain::User, k as u64, 0);
            let w = (0..p[0] * p[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = (0..p[1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            Layer::new(p[0], p[1], w, b)
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(layers)
}

/// `n` points uniform in `[0, 1)^dim` with uniform random labels.
pub fn random_dataset(n: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng::stream(seed, Domain::User, u64::MAX, 0);
    let inputs = (0..n * dim).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes.max(1))).collect();
    Dataset::new(inputs, labels, dim, classes)
}
