//! Shared helpers for the integration tests: deterministic random models and
//! inputs.

use saferad_core::rng::SplitMix64;
use saferad_core::{Layer, Model};

/// Dense network with the given hidden widths, relu between layers, and an
/// optional softmax head. Weights are uniform in [-1, 1], biases in
/// [-0.25, 0.25], all drawn from a seeded generator.
pub fn random_model(seed: u64, n: usize, hidden: &[usize], classes: usize, softmax: bool) -> Model {
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::new();
    let mut width = n;
    for &h in hidden {
        layers.push(random_dense(&mut rng, h, width));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(random_dense(&mut rng, classes, width));
    if softmax {
        layers.push(Layer::Softmax);
    }
    Model::new(format!("random-{seed}"), vec![n], layers).unwrap()
}

fn random_dense(rng: &mut SplitMix64, rows: usize, cols: usize) -> Layer {
    let weights = (0..rows)
        .map(|_| (0..cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect())
        .collect();
    let bias = (0..rows).map(|_| rng.next_f64() * 0.5 - 0.25).collect();
    Layer::Dense { weights, bias }
}

/// Deterministic input in [0, 1]^n.
pub fn random_input(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_f64()).collect()
}
