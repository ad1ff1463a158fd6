//! Subspace enumeration, candidate grids and batched sensitivity computation.
//!
//! For an input `x0` and a dimension count `t`, every size-`t` set of pixel
//! positions spans a subspace in which those pixels range over a finite grid.
//! The sensitivity of a subspace is the largest decrease of the predicted
//! class's confidence achievable on that grid. All candidates of all
//! subspaces are assembled into one tensor, unfolded, pushed through the
//! network in one batched call per chunk, and reduced with a deterministic
//! min along the candidate axis.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;

use crate::infer::{InferError, Model, Prediction};
use crate::rng::SplitMix64;
use crate::tensor::{min_along_first_axis, transpose, unfold_mode_n, SparsePerturbation, TensorND};

#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityError {
    /// Grid tolerance must lie in (0, 1].
    BadEpsilon {
        epsilon: f64,
    },
    /// Requested subspace dimension is zero or exceeds the pixel count.
    DimensionCount {
        t: usize,
        n: usize,
    },
    /// Exhaustive enumeration would produce more subspaces than the cap.
    CapExceeded {
        count: u128,
        cap: u64,
    },
    /// The cap must be at least 1.
    ZeroCap,
    Infer(InferError),
}

impl fmt::Display for SensitivityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadEpsilon { epsilon } => write!(f, "epsilon {epsilon} not in (0, 1]"),
            Self::DimensionCount { t, n } => {
                write!(f, "subspace dimension {t} invalid for {n} pixels")
            }
            Self::CapExceeded { count, cap } => {
                write!(
                    f,
                    "{count} subspaces exceed the cap of {cap}; raise --cap or sample"
                )
            }
            Self::ZeroCap => write!(f, "subspace cap must be at least 1"),
            Self::Infer(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SensitivityError {}

impl From<InferError> for SensitivityError {
    fn from(e: InferError) -> Self {
        Self::Infer(e)
    }
}

/// Per-dimension sampling grid: `delta = ceil(1/epsilon)` intervals, so the
/// sampled values are `{k/delta : k = 0..=delta}`, including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    epsilon: f64,
    delta: usize,
    values: Vec<f64>,
}

impl GridConfig {
    pub fn new(epsilon: f64) -> Result<Self, SensitivityError> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(SensitivityError::BadEpsilon { epsilon });
        }
        let delta = ceil_recip(epsilon);
        let values = (0..=delta).map(|k| k as f64 / delta as f64).collect();
        Ok(Self {
            epsilon,
            delta,
            values,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Samples per dimension, `ceil(1/epsilon)`.
    pub fn delta(&self) -> usize {
        self.delta
    }

    /// The sampled grid values, strictly increasing in `[0, 1]`.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `ceil(1/eps)`, tolerant of binary-float noise when `1/eps` is an integer.
pub(crate) fn ceil_recip(eps: f64) -> usize {
    let q = 1.0 / eps;
    let r = q.round();
    if (q - r).abs() < 1e-9 {
        r as usize
    } else {
        q.ceil() as usize
    }
}

/// A set of pixel positions spanning one perturbation subspace.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubspaceIndex {
    dims: Vec<usize>,
}

impl SubspaceIndex {
    /// Builds from strictly increasing pixel positions below `n`.
    pub fn new(dims: Vec<usize>, n: usize) -> Result<Self, SensitivityError> {
        let increasing = dims.windows(2).all(|w| w[0] < w[1]);
        if dims.is_empty() || !increasing || dims.last().is_some_and(|&d| d >= n) {
            return Err(SensitivityError::DimensionCount { t: dims.len(), n });
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }
}

/// How subspaces are chosen at each dimension count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceMode {
    /// All `C(n, t)` subsets in lexicographic order; errors beyond the cap.
    Exhaustive,
    /// `cap` distinct subsets drawn with a seeded deterministic generator.
    Sampled { seed: u64 },
}

/// `C(n, t)` computed exactly until it saturates `u128`.
pub(crate) fn binomial(n: usize, t: usize) -> u128 {
    if t > n {
        return 0;
    }
    let t = t.min(n - t);
    let mut acc: u128 = 1;
    for i in 0..t {
        acc = acc.saturating_mul((n - i) as u128);
        acc /= (i + 1) as u128;
    }
    acc
}

/// Enumerates the size-`t` pixel sets to explore. Exhaustive mode yields all
/// `C(n, t)` subsets in lexicographic order and errors if that exceeds `cap`;
/// sampled mode yields `cap` distinct subsets from a seeded generator (or all
/// of them when fewer exist).
pub fn enumerate_subspaces(
    n: usize,
    t: usize,
    cap: u64,
    mode: SubspaceMode,
) -> Result<Vec<SubspaceIndex>, SensitivityError> {
    if t == 0 || t > n {
        return Err(SensitivityError::DimensionCount { t, n });
    }
    if cap == 0 {
        return Err(SensitivityError::ZeroCap);
    }
    let count = binomial(n, t);
    match mode {
        SubspaceMode::Exhaustive => {
            if count > cap as u128 {
                return Err(SensitivityError::CapExceeded { count, cap });
            }
            Ok(lexicographic_subsets(n, t))
        }
        SubspaceMode::Sampled { seed } => {
            if count <= cap as u128 {
                return Ok(lexicographic_subsets(n, t));
            }
            let mut rng = SplitMix64::new(seed);
            let mut seen: HashSet<Vec<usize>> = HashSet::new();
            let mut out = Vec::with_capacity(cap as usize);
            while out.len() < cap as usize {
                let mut dims = Vec::with_capacity(t);
                while dims.len() < t {
                    let d = rng.next_below(n as u64) as usize;
                    if !dims.contains(&d) {
                        dims.push(d);
                    }
                }
                dims.sort_unstable();
                if seen.insert(dims.clone()) {
                    out.push(SubspaceIndex { dims });
                }
            }
            Ok(out)
        }
    }
}

fn lexicographic_subsets(n: usize, t: usize) -> Vec<SubspaceIndex> {
    let mut out = Vec::new();
    let mut dims: Vec<usize> = (0..t).collect();
    loop {
        out.push(SubspaceIndex { dims: dims.clone() });
        // advance to the next combination
        let mut i = t;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if dims[i] != i + n - t {
                break;
            }
        }
        dims[i] += 1;
        for j in i + 1..t {
            dims[j] = dims[j - 1] + 1;
        }
    }
}

/// Candidate values for one pixel: `None` keeps the original pixel, `Some(v)`
/// replaces all its channels by the grid value `v`. Grid values that coincide
/// with the original pixel are dropped so the candidate set has no
/// duplicates; the original is always first.
fn pixel_choices(x0: &[f64], dim: usize, grid: &GridConfig, channels: usize) -> Vec<Option<f64>> {
    let base = dim * channels;
    let pixel = &x0[base..base + channels];
    let mut out = Vec::with_capacity(grid.values.len() + 1);
    out.push(None);
    for &v in &grid.values {
        if !pixel.iter().all(|&p| p == v) {
            out.push(Some(v));
        }
    }
    out
}

/// All grid candidates of a subspace: `x0` with the subspace's pixels
/// replaced by every combination of grid values and the original value. The
/// original input is always among the candidates (at index 0). Returns the
/// candidate batch (one row per candidate) and the perturbation realizing
/// each row.
pub fn build_candidates(
    x0: &[f64],
    sub: &SubspaceIndex,
    grid: &GridConfig,
    channels: usize,
) -> (TensorND, Vec<SparsePerturbation>) {
    let perts = candidate_perturbations(x0, sub, grid, channels);
    let n = x0.len();
    let mut data = Vec::with_capacity(perts.len() * n);
    for pert in &perts {
        data.extend_from_slice(&pert.applied(x0, channels));
    }
    let batch = TensorND::new(vec![perts.len(), n], data).expect("candidate batch shape");
    (batch, perts)
}

/// The perturbations realizing each candidate of a subspace, in the fixed
/// candidate order (row-major over per-dimension choice lists, original value
/// first in each list).
fn candidate_perturbations(
    x0: &[f64],
    sub: &SubspaceIndex,
    grid: &GridConfig,
    channels: usize,
) -> Vec<SparsePerturbation> {
    let choices: Vec<Vec<Option<f64>>> = sub
        .dims
        .iter()
        .map(|&d| pixel_choices(x0, d, grid, channels))
        .collect();
    let total: usize = choices.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut cursor = vec![0usize; choices.len()];
    for _ in 0..total {
        let mut pert = SparsePerturbation::new();
        for (slot, &c) in cursor.iter().enumerate() {
            if let Some(v) = choices[slot][c] {
                pert.insert(sub.dims[slot], v);
            }
        }
        out.push(pert);
        for slot in (0..cursor.len()).rev() {
            cursor[slot] += 1;
            if cursor[slot] < choices[slot].len() {
                break;
            }
            cursor[slot] = 0;
        }
    }
    out
}

/// Sensitivity of one subspace of one input.
#[derive(Debug, Clone)]
pub struct SubspaceResult {
    pub subspace: SubspaceIndex,
    /// `c_j(x0) - min over candidates of c_j`; never negative because the
    /// original input is itself a candidate.
    pub sensitivity: f64,
    /// Perturbation reaching the minimizing candidate; empty when the
    /// original input minimizes.
    pub best_perturbation: SparsePerturbation,
    /// Full prediction of the minimizing candidate.
    pub best_prediction: Prediction,
}

/// A candidate whose prediction differs from the input's class, found while
/// scanning the batch. Kept with the smallest L0 weight seen.
#[derive(Debug, Clone)]
pub struct FlipWitness {
    pub perturbation: SparsePerturbation,
    pub prediction: Prediction,
}

/// All subspace sensitivities of one input at one dimension count.
#[derive(Debug, Clone)]
pub struct InputSensitivity {
    /// Prediction of the unperturbed input.
    pub base: Prediction,
    /// Per-subspace results in enumeration order.
    pub subspaces: Vec<SubspaceResult>,
    /// Permutation of `subspaces` by descending sensitivity; ties resolve to
    /// the lexicographically smaller dimension set.
    pub order: Vec<usize>,
    /// Minimal-weight candidate observed to change the class, if any.
    pub flip_witness: Option<FlipWitness>,
    /// Network evaluations spent (padding rows included).
    pub queries: u64,
}

/// Sensitivities for a whole test set at one dimension count.
#[derive(Debug, Clone)]
pub struct SensitivityBatch {
    pub t: usize,
    pub per_input: Vec<InputSensitivity>,
}

/// Computes [`InputSensitivity`] for one input. `chunk_rows` caps the number
/// of candidate rows assembled per forward call; chunk boundaries never
/// affect results.
#[allow(clippy::too_many_arguments)]
pub fn input_sensitivity(
    model: &Model,
    x0: &[f64],
    base: &Prediction,
    t: usize,
    grid: &GridConfig,
    mode: SubspaceMode,
    cap: u64,
    chunk_rows: usize,
) -> Result<InputSensitivity, SensitivityError> {
    let subspaces = enumerate_subspaces(model.pixel_count(), t, cap, mode)?;
    let channels = model.channels();
    let chunk_rows = chunk_rows.max(1);

    // greedy chunking: q_max * k never exceeds chunk_rows (single oversized
    // subspaces still go through alone)
    let counts: Vec<usize> = subspaces
        .iter()
        .map(|s| {
            s.dims
                .iter()
                .map(|&d| pixel_choices(x0, d, grid, channels).len())
                .product()
        })
        .collect();
    let mut chunks: Vec<(usize, usize)> = Vec::new(); // (start, end)
    let mut start = 0;
    let mut q_max = 0usize;
    for (i, &q) in counts.iter().enumerate() {
        let new_q = q_max.max(q);
        if i > start && new_q * (i - start + 1) > chunk_rows {
            chunks.push((start, i));
            start = i;
            q_max = q;
        } else {
            q_max = new_q;
        }
    }
    if start < subspaces.len() {
        chunks.push((start, subspaces.len()));
    }

    let evaluated: Vec<ChunkOutcome> = chunks
        .par_iter()
        .map(|&(s, e)| evaluate_chunk(model, x0, base, &subspaces[s..e], grid, channels))
        .collect::<Result<_, _>>()?;

    let mut results = Vec::with_capacity(subspaces.len());
    let mut queries = 0u64;
    let mut flip_witness: Option<FlipWitness> = None;
    for chunk in evaluated {
        queries += chunk.queries;
        results.extend(chunk.results);
        if let Some(w) = chunk.flip_witness {
            let better = match &flip_witness {
                None => true,
                Some(cur) => w.perturbation.weight() < cur.perturbation.weight(),
            };
            if better {
                flip_witness = Some(w);
            }
        }
    }

    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[b]
            .sensitivity
            .partial_cmp(&results[a].sensitivity)
            .expect("sensitivities are finite")
            .then_with(|| results[a].subspace.dims.cmp(&results[b].subspace.dims))
    });

    Ok(InputSensitivity {
        base: base.clone(),
        subspaces: results,
        order,
        flip_witness,
        queries,
    })
}

struct ChunkOutcome {
    results: Vec<SubspaceResult>,
    flip_witness: Option<FlipWitness>,
    queries: u64,
}

/// One assembled tensor per chunk: shape `[n, q, k]` with pixels first
/// (candidate slots padded with the original input), mode-1 unfolded to
/// `[n, q*k]`, transposed into the batch layout the network consumes, and
/// reduced with a min along the candidate axis.
fn evaluate_chunk(
    model: &Model,
    x0: &[f64],
    base: &Prediction,
    subspaces: &[SubspaceIndex],
    grid: &GridConfig,
    channels: usize,
) -> Result<ChunkOutcome, SensitivityError> {
    let n = x0.len();
    let k = subspaces.len();
    let perts: Vec<Vec<SparsePerturbation>> = subspaces
        .iter()
        .map(|s| candidate_perturbations(x0, s, grid, channels))
        .collect();
    let q = perts.iter().map(Vec::len).max().unwrap_or(1);

    let mut assembled = vec![0.0; n * q * k];
    for (si, subspace_perts) in perts.iter().enumerate() {
        for cand in 0..q {
            let row = match subspace_perts.get(cand) {
                Some(p) => p.applied(x0, channels),
                None => x0.to_vec(),
            };
            for (p, &value) in row.iter().enumerate() {
                assembled[p * q * k + cand * k + si] = value;
            }
        }
    }
    let tensor = TensorND::new(vec![n, q, k], assembled).expect("chunk tensor shape");
    let unfolded = unfold_mode_n(&tensor, 0).expect("mode-1 unfold");
    let mut batch_shape = vec![q * k];
    batch_shape.extend_from_slice(&model.input_shape);
    let batch = transpose(&unfolded)
        .expect("rank-2 transpose")
        .reshape(batch_shape)
        .expect("batch reshape");
    let preds = model.forward_batch(&batch)?;

    let j = base.label;
    let confidences: Vec<f64> = preds.iter().map(|p| p.confidences[j]).collect();
    let grid_tensor = TensorND::new(vec![q, k], confidences).expect("confidence grid");
    let (mins, argmins) = min_along_first_axis(&grid_tensor).expect("candidate-axis min");

    let mut results = Vec::with_capacity(k);
    for (si, subspace) in subspaces.iter().enumerate() {
        let best = argmins[si];
        results.push(SubspaceResult {
            subspace: subspace.clone(),
            sensitivity: base.confidences[j] - mins.data()[si],
            best_perturbation: perts[si][best].clone(),
            best_prediction: preds[best * k + si].clone(),
        });
    }

    let mut flip_witness: Option<FlipWitness> = None;
    for (si, subspace_perts) in perts.iter().enumerate() {
        for (cand, pert) in subspace_perts.iter().enumerate() {
            let pred = &preds[cand * k + si];
            if pred.label != j {
                let better = match &flip_witness {
                    None => true,
                    Some(cur) => pert.weight() < cur.perturbation.weight(),
                };
                if better {
                    flip_witness = Some(FlipWitness {
                        perturbation: pert.clone(),
                        prediction: pred.clone(),
                    });
                }
            }
        }
    }

    Ok(ChunkOutcome {
        results,
        flip_witness,
        queries: (q * k) as u64,
    })
}

/// Computes the sensitivity batch for a whole set of inputs at dimension `t`.
/// Inputs are processed independently and in parallel; sampled-mode seeds are
/// derived per input index so results do not depend on scheduling.
pub fn compute_sensitivity(
    model: &Model,
    inputs: &[Vec<f64>],
    t: usize,
    grid: &GridConfig,
    mode: SubspaceMode,
    cap: u64,
    chunk_rows: usize,
) -> Result<SensitivityBatch, SensitivityError> {
    let per_input: Vec<InputSensitivity> = inputs
        .par_iter()
        .enumerate()
        .map(|(idx, x0)| {
            let base = model.forward_one(x0)?;
            let input_mode = match mode {
                SubspaceMode::Exhaustive => SubspaceMode::Exhaustive,
                SubspaceMode::Sampled { seed } => SubspaceMode::Sampled {
                    seed: crate::rng::seed_for(seed, idx, t),
                },
            };
            let mut sens =
                input_sensitivity(model, x0, &base, t, grid, input_mode, cap, chunk_rows)?;
            sens.queries += 1; // the base prediction above
            Ok(sens)
        })
        .collect::<Result<_, SensitivityError>>()?;
    Ok(SensitivityBatch { t, per_input })
}
