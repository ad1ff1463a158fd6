//! Independent brute-force oracles for the acceptance suite. Everything here
//! evaluates candidates one at a time through `forward_one` and enumerates
//! subsets and grid assignments with its own recursion; none of it touches
//! the batched tensor pipeline it is used to check.

use saferad_core::rng::SplitMix64;
use saferad_core::sensitivity::GridConfig;
use saferad_core::tensor::SparsePerturbation;
use saferad_core::{Layer, Model};

pub fn random_model(seed: u64, n: usize, hidden: &[usize], classes: usize) -> Model {
    let mut rng = SplitMix64::new(seed);
    let mut layers = Vec::new();
    let mut width = n;
    for &h in hidden {
        layers.push(random_dense(&mut rng, h, width));
        layers.push(Layer::Relu);
        width = h;
    }
    layers.push(random_dense(&mut rng, classes, width));
    layers.push(Layer::Softmax);
    Model::new(format!("random-{seed}"), vec![n], layers).unwrap()
}

fn random_dense(rng: &mut SplitMix64, rows: usize, cols: usize) -> Layer {
    let weights = (0..rows)
        .map(|_| (0..cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect())
        .collect();
    let bias = (0..rows).map(|_| rng.next_f64() * 0.5 - 0.25).collect();
    Layer::Dense { weights, bias }
}

pub fn random_input(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_f64()).collect()
}

/// All size-`t` subsets of `0..n` in lexicographic order, by plain recursion.
pub fn subsets(n: usize, t: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(start: usize, n: usize, t: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == t {
            out.push(current.clone());
            return;
        }
        for d in start..n {
            current.push(d);
            rec(d + 1, n, t, current, out);
            current.pop();
        }
    }
    rec(0, n, t, &mut current, &mut out);
    out
}

/// Candidate pixel values for one subspace dimension, following the written
/// rule: the original value first, then the grid values that change the
/// pixel, ascending.
fn dim_values(x0: &[f64], dim: usize, grid: &GridConfig) -> Vec<Option<f64>> {
    let mut out = vec![None];
    for &v in grid.values() {
        if x0[dim] != v {
            out.push(Some(v));
        }
    }
    out
}

/// Result of evaluating one subspace candidate by candidate.
pub struct OracleSubspace {
    pub dims: Vec<usize>,
    pub sensitivity: f64,
    pub best_perturbation: SparsePerturbation,
}

/// Per-subspace sensitivities computed one forward pass at a time, plus the
/// ordering permutation under the descending-sensitivity rule with
/// lexicographic tie-break.
pub fn naive_sensitivity(
    model: &Model,
    x0: &[f64],
    t: usize,
    grid: &GridConfig,
) -> (Vec<OracleSubspace>, Vec<usize>) {
    let base = model.forward_one(x0).unwrap();
    let j = base.label;
    let mut results = Vec::new();
    for dims in subsets(model.pixel_count(), t) {
        let value_lists: Vec<Vec<Option<f64>>> =
            dims.iter().map(|&d| dim_values(x0, d, grid)).collect();
        let mut best_conf = f64::INFINITY;
        let mut best_pert = SparsePerturbation::new();
        let mut cursor = vec![0usize; t];
        let total: usize = value_lists.iter().map(Vec::len).product();
        for _ in 0..total {
            let mut input = x0.to_vec();
            let mut pert = SparsePerturbation::new();
            for (slot, &c) in cursor.iter().enumerate() {
                if let Some(v) = value_lists[slot][c] {
                    input[dims[slot]] = v;
                    pert.insert(dims[slot], v);
                }
            }
            let conf = model.forward_one(&input).unwrap().confidences[j];
            if conf < best_conf {
                best_conf = conf;
                best_pert = pert;
            }
            for slot in (0..t).rev() {
                cursor[slot] += 1;
                if cursor[slot] < value_lists[slot].len() {
                    break;
                }
                cursor[slot] = 0;
            }
        }
        results.push(OracleSubspace {
            dims,
            sensitivity: base.confidences[j] - best_conf,
            best_perturbation: best_pert,
        });
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[b]
            .sensitivity
            .partial_cmp(&results[a].sensitivity)
            .unwrap()
            .then_with(|| results[a].dims.cmp(&results[b].dims))
    });
    (results, order)
}

/// True when some grid perturbation of weight at most `max_weight` changes
/// the predicted class.
pub fn exists_flip_up_to(model: &Model, x0: &[f64], grid: &GridConfig, max_weight: usize) -> bool {
    min_grid_adversarial_up_to(model, x0, grid, max_weight).is_some()
}

/// Minimal weight over all grid perturbations that change the class, or
/// `None` if none exists up to `max_weight`.
pub fn min_grid_adversarial_up_to(
    model: &Model,
    x0: &[f64],
    grid: &GridConfig,
    max_weight: usize,
) -> Option<usize> {
    let n = model.pixel_count();
    let base = model.forward_one(x0).unwrap().label;
    let changing: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            grid.values()
                .iter()
                .copied()
                .filter(|&v| x0[p] != v)
                .collect()
        })
        .collect();
    for weight in 1..=max_weight.min(n) {
        for subset in subsets(n, weight) {
            if flips_with_any_assignment(model, x0, base, &subset, &changing, 0, &mut x0.to_vec()) {
                return Some(weight);
            }
        }
    }
    None
}

fn flips_with_any_assignment(
    model: &Model,
    x0: &[f64],
    base: usize,
    subset: &[usize],
    changing: &[Vec<f64>],
    slot: usize,
    input: &mut Vec<f64>,
) -> bool {
    if slot == subset.len() {
        return model.forward_one(input).unwrap().label != base;
    }
    let p = subset[slot];
    for &v in &changing[p] {
        input[p] = v;
        if flips_with_any_assignment(model, x0, base, subset, changing, slot + 1, input) {
            input[p] = x0[p];
            return true;
        }
    }
    input[p] = x0[p];
    false
}

/// Minimal grid adversarial distance over the whole input space.
pub fn min_grid_adversarial(model: &Model, x0: &[f64], grid: &GridConfig) -> Option<usize> {
    min_grid_adversarial_up_to(model, x0, grid, model.pixel_count())
}
