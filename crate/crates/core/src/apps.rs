//! Adaptations of the bounds pipeline: a competitive L0 attack, neuron
//! coverage test generation, and occlusion-style saliency maps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bounds::{minimize_support, tighten, BoundsError};
use crate::infer::{Model, NeuronId};
use crate::io::Dataset;
use crate::sensitivity::{
    build_candidates, enumerate_subspaces, input_sensitivity, GridConfig, SubspaceMode,
};
use crate::tensor::{SparsePerturbation, TensorND};

/// A class-changing input found by [`attack`].
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// The perturbed input.
    pub adversarial: Vec<f64>,
    /// The 1-minimal perturbation that produces it.
    pub perturbation: SparsePerturbation,
    /// L0 distance from the original input.
    pub distance: usize,
    pub queries: u64,
}

/// Single-iteration attack: subspace sensitivities at `t = 1`, ranked
/// accumulation over at most `budget` prefixes, tightening of the first
/// class-changing prefix. Returns `None` when no prefix changes the class.
pub fn attack(
    model: &Model,
    x0: &[f64],
    grid: &GridConfig,
    budget: usize,
    cap: u64,
    mode: SubspaceMode,
    chunk_rows: usize,
) -> Result<Option<AttackResult>, BoundsError> {
    let base = model.forward_one(x0)?;
    let sens = input_sensitivity(model, x0, &base, 1, grid, mode, cap, chunk_rows)?;
    let mut queries = sens.queries + 1;

    let channels = model.channels();
    let mut prefixes = Vec::new();
    let mut acc = SparsePerturbation::new();
    for &si in sens.order.iter().take(budget.max(1)) {
        acc = acc.union(&sens.subspaces[si].best_perturbation);
        prefixes.push(acc.clone());
    }

    let mut flipped: Option<usize> = None;
    let chunk = chunk_rows.max(1);
    'outer: for (c, chunk_prefixes) in prefixes.chunks(chunk).enumerate() {
        let mut data = Vec::with_capacity(chunk_prefixes.len() * x0.len());
        for p in chunk_prefixes {
            data.extend_from_slice(&p.applied(x0, channels));
        }
        let mut shape = vec![chunk_prefixes.len()];
        shape.extend_from_slice(&model.input_shape);
        let batch = TensorND::new(shape, data).expect("prefix batch shape");
        let preds = model.forward_batch(&batch)?;
        queries += chunk_prefixes.len() as u64;
        for (i, pred) in preds.iter().enumerate() {
            if pred.label != base.label {
                flipped = Some(c * chunk + i);
                break 'outer;
            }
        }
    }

    let Some(m) = flipped else { return Ok(None) };
    let (tight, q) = tighten(model, x0, &prefixes[m])?;
    queries += q;
    Ok(Some(AttackResult {
        adversarial: tight.applied(x0, channels),
        distance: tight.weight(),
        perturbation: tight,
        queries,
    }))
}

/// A generated coverage test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedTest {
    /// The neuron this input activates.
    pub neuron: NeuronId,
    /// Id of the dataset input the search started from.
    pub seed_id: String,
    /// L0 distance from the seed.
    pub distance: usize,
    /// The generated input, flat.
    pub input: Vec<f64>,
}

/// Neuron coverage of a test suite, with the tests generated to raise it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total_neurons: usize,
    /// Neurons activated by at least one suite input (original or generated).
    pub covered: Vec<NeuronId>,
    pub fraction: f64,
    pub tests: Vec<GeneratedTest>,
}

/// Configuration for [`testgen`].
#[derive(Debug, Clone)]
pub struct TestgenConfig {
    /// A neuron counts as covered when its activation exceeds this.
    pub threshold: f64,
    /// Largest subspace dimension tried per uncovered neuron.
    pub budget: usize,
    pub cap: u64,
    pub chunk_rows: usize,
}

impl Default for TestgenConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            budget: 2,
            cap: 1_000_000,
            chunk_rows: 4096,
        }
    }
}

/// Hidden neurons activated by the given inputs, plus the total count.
pub fn measure_coverage(
    model: &Model,
    inputs: &[&[f64]],
    threshold: f64,
) -> Result<(BTreeSet<NeuronId>, usize), BoundsError> {
    let total = model.hidden_neuron_count()?;
    let mut covered = BTreeSet::new();
    for input in inputs {
        for (id, value) in model.record_activations(input)? {
            if value > threshold {
                covered.insert(id);
            }
        }
    }
    Ok((covered, total))
}

/// Coverage-guided test generation. Measures baseline coverage over the
/// dataset, then for every still-uncovered neuron reruns the sensitivity and
/// accumulation pipeline with the class-change condition replaced by
/// "the neuron's activation exceeds the threshold", seeded from the dataset
/// input with the largest pre-activation for that neuron. Coverage never
/// decreases; neurons the search cannot activate within the budget stay
/// uncovered.
pub fn testgen(
    model: &Model,
    dataset: &Dataset,
    grid: &GridConfig,
    config: &TestgenConfig,
) -> Result<CoverageReport, BoundsError> {
    let inputs: Vec<&[f64]> = dataset.inputs.iter().map(|t| t.data()).collect();
    let (mut covered, total) = measure_coverage(model, &inputs, config.threshold)?;

    // all hidden neuron ids, in layer-then-offset order
    let all_neurons: Vec<NeuronId> = if inputs.is_empty() {
        Vec::new()
    } else {
        model
            .record_activations(inputs[0])?
            .into_iter()
            .map(|(id, _)| id)
            .collect()
    };

    let channels = model.channels();
    let mut tests = Vec::new();
    for &neuron in &all_neurons {
        if covered.contains(&neuron) {
            continue;
        }
        // seed: the input whose pre-activation for this neuron is largest
        let mut seed_idx = 0;
        let mut seed_best = f64::NEG_INFINITY;
        for (i, input) in inputs.iter().enumerate() {
            let pre = pre_activation_of(model, input, neuron)?;
            if pre > seed_best {
                seed_best = pre;
                seed_idx = i;
            }
        }
        let x0 = inputs[seed_idx];

        if let Some(pert) = activate_neuron(model, x0, neuron, grid, config, channels)? {
            let input = pert.applied(x0, channels);
            // one generated input can cover more than its target
            for (id, value) in model.record_activations(&input)? {
                if value > config.threshold {
                    covered.insert(id);
                }
            }
            tests.push(GeneratedTest {
                neuron,
                seed_id: dataset.ids[seed_idx].clone(),
                distance: pert.weight(),
                input,
            });
        }
    }

    let fraction = if total == 0 {
        1.0
    } else {
        covered.len() as f64 / total as f64
    };
    Ok(CoverageReport {
        total_neurons: total,
        covered: covered.into_iter().collect(),
        fraction,
        tests,
    })
}

fn pre_activation_of(model: &Model, input: &[f64], neuron: NeuronId) -> Result<f64, BoundsError> {
    let values = model.pre_activation_values(input)?;
    values
        .into_iter()
        .find(|(id, _)| *id == neuron)
        .map(|(_, v)| v)
        .ok_or(BoundsError::TightenPrecondition) // unreachable for valid ids
}

/// Searches for a minimal perturbation of `x0` whose image activates
/// `neuron`: candidate grids ranked by achievable pre-activation, then
/// accumulated prefixes, then support minimization, for t = 1..=budget.
fn activate_neuron(
    model: &Model,
    x0: &[f64],
    neuron: NeuronId,
    grid: &GridConfig,
    config: &TestgenConfig,
    channels: usize,
) -> Result<Option<SparsePerturbation>, BoundsError> {
    let n = model.pixel_count();
    let threshold = config.threshold;
    for t in 1..=config.budget.min(n).max(1) {
        let subspaces = enumerate_subspaces(n, t, config.cap, SubspaceMode::Exhaustive)?;

        // per subspace: the candidate reaching the highest pre-activation
        let mut ranked: Vec<(f64, usize, SparsePerturbation)> = Vec::new();
        let mut winner: Option<SparsePerturbation> = None;
        for (si, sub) in subspaces.iter().enumerate() {
            let (batch, perts) = build_candidates(x0, sub, grid, channels);
            let row_len = x0.len();
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for (c, row) in batch.data().chunks(row_len).enumerate() {
                let pre = pre_activation_of(model, row, neuron)?;
                if pre > best {
                    best = pre;
                    best_idx = c;
                }
                if pre.max(0.0) > threshold {
                    let better = match &winner {
                        None => true,
                        Some(w) => perts[c].weight() < w.weight(),
                    };
                    if better {
                        winner = Some(perts[c].clone());
                    }
                }
            }
            ranked.push((best, si, perts[best_idx].clone()));
        }

        if winner.is_none() {
            // no single candidate activates; try accumulated prefixes
            ranked.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("activations are finite")
                    .then_with(|| subspaces[a.1].dims().cmp(subspaces[b.1].dims()))
            });
            let mut acc = SparsePerturbation::new();
            for (_, _, pert) in &ranked {
                acc = acc.union(pert);
                let image = acc.applied(x0, channels);
                let pre = pre_activation_of(model, &image, neuron)?;
                if pre.max(0.0) > threshold {
                    winner = Some(acc.clone());
                    break;
                }
            }
        }

        if let Some(pert) = winner {
            let (tight, _) = minimize_support(x0, &pert, channels, |input| {
                let pre = pre_activation_of(model, input, neuron)?;
                Ok::<bool, BoundsError>(pre.max(0.0) > threshold)
            })?;
            return Ok(Some(tight));
        }
    }
    Ok(None)
}

/// Per-pixel sensitivity map of one input, shaped like the spatial input.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub values: TensorND,
}

/// The t = 1 subspace sensitivity of every pixel, reshaped to the spatial
/// input shape. Pixels the model ignores score exactly zero.
pub fn saliency(
    model: &Model,
    x0: &[f64],
    grid: &GridConfig,
    chunk_rows: usize,
) -> Result<SaliencyMap, BoundsError> {
    let n = model.pixel_count();
    let base = model.forward_one(x0)?;
    let sens = input_sensitivity(
        model,
        x0,
        &base,
        1,
        grid,
        SubspaceMode::Exhaustive,
        n as u64,
        chunk_rows,
    )?;
    // enumeration order at t = 1 is pixel order
    let values: Vec<f64> = sens.subspaces.iter().map(|r| r.sensitivity).collect();
    let map = TensorND::new(model.spatial_shape(), values).expect("spatial shape");
    Ok(SaliencyMap { values: map })
}
