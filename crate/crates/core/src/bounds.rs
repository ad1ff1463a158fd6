//! The anytime driver: certified lower bounds, accumulated upper bounds,
//! tightening and convergence detection per input, plus dataset-level
//! aggregation.
//!
//! Bounds use integer L0 semantics: `lower` is the largest certified-safe
//! radius, `upper` the smallest witnessed adversarial distance, and an input
//! has converged exactly when `upper == lower + 1` (the true radius is then
//! `lower`) or when the whole input space is certified (`lower == n`, no
//! adversarial exists on the grid).

use std::fmt;
use std::time::Instant;

use num_bigint::BigUint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::infer::{InferError, Model, Prediction};
use crate::io::Dataset;
use crate::rng::seed_for;
use crate::sensitivity::{
    input_sensitivity, GridConfig, InputSensitivity, SensitivityError, SubspaceMode,
};
use crate::tensor::{SparsePerturbation, TensorND};

#[derive(Debug)]
pub enum BoundsError {
    Sensitivity(SensitivityError),
    Infer(InferError),
    /// A dataset label is outside the model's class range.
    LabelOutOfRange {
        input: String,
        label: usize,
        classes: usize,
    },
    /// A dataset input does not match the model input length.
    InputLength {
        input: String,
        expected: usize,
        got: usize,
    },
    /// `tighten` was called with a perturbation that does not change the class.
    TightenPrecondition,
    /// `t_max` must be at least 1.
    BadTMax,
    /// `worst_case_queries` needs `n >= 1` and `epsilon` in (0, 1].
    BadQueryArgs {
        n: usize,
        epsilon: f64,
    },
    /// The report sink failed.
    Emit {
        detail: String,
    },
}

impl fmt::Display for BoundsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sensitivity(e) => write!(f, "{e}"),
            Self::Infer(e) => write!(f, "{e}"),
            Self::LabelOutOfRange {
                input,
                label,
                classes,
            } => {
                write!(f, "input {input}: label {label} outside 0..{classes}")
            }
            Self::InputLength {
                input,
                expected,
                got,
            } => {
                write!(f, "input {input}: {got} values, model expects {expected}")
            }
            Self::TightenPrecondition => {
                write!(
                    f,
                    "tighten: perturbation does not change the predicted class"
                )
            }
            Self::BadTMax => write!(f, "t_max must be at least 1"),
            Self::BadQueryArgs { n, epsilon } => {
                write!(f, "worst_case_queries needs n >= 1 and epsilon in (0, 1], got n={n}, epsilon={epsilon}")
            }
            Self::Emit { detail } => write!(f, "report emit failed: {detail}"),
        }
    }
}

impl std::error::Error for BoundsError {}

impl From<SensitivityError> for BoundsError {
    fn from(e: SensitivityError) -> Self {
        Self::Sensitivity(e)
    }
}

impl From<InferError> for BoundsError {
    fn from(e: InferError) -> Self {
        Self::Infer(e)
    }
}

/// How the lower-bound check treats the candidate batch.
///
/// `Strict` certifies radius `t` only when no evaluated candidate changes the
/// class; `Paper` checks the top-ranked perturbation alone and declares
/// convergence when it flips. Both cost the same number of network queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    Strict,
    Paper,
}

/// Driver configuration.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub epsilon: f64,
    pub t_max: usize,
    pub cap: u64,
    pub subspace_mode: SubspaceMode,
    pub check_mode: CheckMode,
    /// Candidate rows assembled per forward call.
    pub chunk_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.25,
            t_max: 2,
            cap: 1_000_000,
            subspace_mode: SubspaceMode::Exhaustive,
            check_mode: CheckMode::Strict,
            chunk_rows: 4096,
        }
    }
}

/// Per-input bound state.
#[derive(Debug, Clone)]
pub struct InputBounds {
    pub id: String,
    pub dataset_label: Option<usize>,
    pub prediction: Prediction,
    /// Largest certified-safe L0 radius.
    pub lower: usize,
    /// Smallest witnessed adversarial L0 distance.
    pub upper: Option<usize>,
    pub best_adversarial: Option<SparsePerturbation>,
    pub converged: bool,
    /// Set when the model already misclassifies the input relative to its
    /// dataset label; such inputs are excluded from aggregates.
    pub skipped: bool,
}

impl InputBounds {
    /// Largest radius that may still be safe: `upper - 1`, or the pixel count
    /// when no adversarial has been found.
    pub fn possible_radius(&self, pixel_count: usize) -> usize {
        self.upper.map(|u| u - 1).unwrap_or(pixel_count)
    }

    /// Midpoint of the remaining interval for the maximum safe radius.
    pub fn u_c(&self, pixel_count: usize) -> f64 {
        (self.lower + self.possible_radius(pixel_count)) as f64 / 2.0
    }

    /// Half-width of the remaining interval; zero exactly at convergence.
    pub fn u_r(&self, pixel_count: usize) -> f64 {
        (self.possible_radius(pixel_count) - self.lower) as f64 / 2.0
    }

    /// The maximum safe radius once converged.
    pub fn d_m(&self, pixel_count: usize) -> Option<usize> {
        self.converged.then(|| self.possible_radius(pixel_count))
    }

    fn refresh_converged(&mut self, pixel_count: usize) {
        if self.upper == Some(self.lower + 1) || self.lower == pixel_count {
            self.converged = true;
        }
    }

    /// Records an adversarial if it is strictly closer than the current best.
    /// A witness below the current lower bound (possible under sampled
    /// enumeration or the top-1 check, never under strict exhaustive runs)
    /// is hard evidence that the certified claim was wrong, so the lower
    /// bound is clamped under it.
    fn offer_adversarial(&mut self, adv: SparsePerturbation, pixel_count: usize) {
        let w = adv.weight();
        if self.upper.is_none_or(|u| w < u) {
            self.upper = Some(w);
            self.best_adversarial = Some(adv);
            if self.lower >= w {
                self.lower = w - 1;
            }
        }
        self.refresh_converged(pixel_count);
    }
}

/// Bound state for a whole dataset.
#[derive(Debug, Clone)]
pub struct BoundsState {
    pub per_input: Vec<InputBounds>,
    pub pixel_count: usize,
    /// Cumulative network evaluations.
    pub queries: u64,
}

/// Per-input slice of an emitted report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputReport {
    pub id: String,
    pub original_label: Option<usize>,
    pub predicted_label: usize,
    pub lower: usize,
    pub upper: Option<usize>,
    pub converged: bool,
    pub skipped: bool,
    pub u_c: Option<f64>,
    pub u_r: Option<f64>,
    pub adversarial_distance: Option<usize>,
    pub perturbed_positions: Vec<usize>,
}

/// Aggregates over the non-skipped inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_lower: Option<f64>,
    pub mean_upper: Option<f64>,
    /// Global robustness estimate: mean of per-input `u_c`.
    pub u_c: Option<f64>,
    pub u_r: Option<f64>,
    pub query_count: Option<u64>,
    pub wall_time_ms: Option<f64>,
}

/// Snapshot emitted after every iteration; valid whenever the run stops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnytimeReport {
    pub iteration: usize,
    pub inputs: Vec<InputReport>,
    pub aggregate: Aggregate,
}

/// The anytime bounds driver for one model.
pub struct Engine<'a> {
    model: &'a Model,
    grid: GridConfig,
    config: EvalConfig,
}

impl<'a> Engine<'a> {
    pub fn new(model: &'a Model, config: EvalConfig) -> Result<Self, BoundsError> {
        if config.t_max == 0 {
            return Err(BoundsError::BadTMax);
        }
        let grid = GridConfig::new(config.epsilon)?;
        Ok(Self {
            model,
            grid,
            config,
        })
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn config(&self) -> &EvalConfig {
        &self.config
    }

    /// Updates the lower bound of one input from the sensitivities at
    /// dimension `t`. Uses only predictions already recorded in `sens`; the
    /// only extra queries are for tightening a discovered adversarial.
    pub fn lower_bound_step(
        &self,
        ib: &mut InputBounds,
        x0: &[f64],
        sens: &InputSensitivity,
        t: usize,
    ) -> Result<u64, BoundsError> {
        let n = self.model.pixel_count();
        let mut queries = 0;
        match self.config.check_mode {
            CheckMode::Paper => {
                let top = &sens.subspaces[sens.order[0]];
                if top.best_prediction.label == ib.prediction.label {
                    ib.lower = t;
                    ib.refresh_converged(n);
                } else {
                    // top-ranked perturbation changes the class: the search
                    // for this input ends here
                    let (tight, q) = tighten(self.model, x0, &top.best_perturbation)?;
                    queries += q;
                    ib.offer_adversarial(tight, n);
                    ib.converged = true;
                }
            }
            CheckMode::Strict => match &sens.flip_witness {
                None => {
                    ib.lower = t;
                    ib.refresh_converged(n);
                }
                Some(witness) => {
                    let (tight, q) = tighten(self.model, x0, &witness.perturbation)?;
                    queries += q;
                    ib.offer_adversarial(tight, n);
                }
            },
        }
        Ok(queries)
    }

    /// Accumulates the ranked best perturbations, evaluates every prefix, and
    /// offers the first class-changing prefix (tightened) as an upper bound.
    pub fn upper_bound_step(
        &self,
        ib: &mut InputBounds,
        x0: &[f64],
        sens: &InputSensitivity,
    ) -> Result<u64, BoundsError> {
        let j = ib.prediction.label;
        let channels = self.model.channels();
        let mut queries = 0u64;

        let mut prefixes = Vec::with_capacity(sens.order.len());
        let mut acc = SparsePerturbation::new();
        for &si in &sens.order {
            acc = acc.union(&sens.subspaces[si].best_perturbation);
            prefixes.push(acc.clone());
        }

        let mut flipped: Option<usize> = None;
        let chunk = self.config.chunk_rows.max(1);
        'outer: for (c, chunk_prefixes) in prefixes.chunks(chunk).enumerate() {
            let mut data = Vec::with_capacity(chunk_prefixes.len() * x0.len());
            for p in chunk_prefixes {
                data.extend_from_slice(&p.applied(x0, channels));
            }
            let mut shape = vec![chunk_prefixes.len()];
            shape.extend_from_slice(&self.model.input_shape);
            let batch = TensorND::new(shape, data).expect("prefix batch shape");
            let preds = self.model.forward_batch(&batch)?;
            queries += chunk_prefixes.len() as u64;
            for (i, pred) in preds.iter().enumerate() {
                if pred.label != j {
                    flipped = Some(c * chunk + i);
                    break 'outer;
                }
            }
        }

        if let Some(m) = flipped {
            let (tight, q) = tighten(self.model, x0, &prefixes[m])?;
            queries += q;
            ib.offer_adversarial(tight, self.model.pixel_count());
        }
        Ok(queries)
    }

    /// Runs the full anytime pipeline over a dataset. `sink` receives each
    /// report as soon as its iteration completes, which is what makes
    /// interruption at any point leave valid output behind.
    pub fn evaluate<F>(
        &self,
        dataset: &Dataset,
        mut sink: F,
    ) -> Result<(Vec<AnytimeReport>, BoundsState), BoundsError>
    where
        F: FnMut(&AnytimeReport) -> std::io::Result<()>,
    {
        let started = Instant::now();
        let classes = self.model.num_classes()?;
        let n = self.model.pixel_count();
        let input_len = self.model.input_len();

        let inputs: Vec<&[f64]> = dataset.inputs.iter().map(|t| t.data()).collect();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != input_len {
                return Err(BoundsError::InputLength {
                    input: dataset.ids[i].clone(),
                    expected: input_len,
                    got: x.len(),
                });
            }
        }
        if let Some(labels) = &dataset.labels {
            for (i, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(BoundsError::LabelOutOfRange {
                        input: dataset.ids[i].clone(),
                        label,
                        classes,
                    });
                }
            }
        }

        let mut queries = inputs.len() as u64;
        let base_preds: Vec<Prediction> = if inputs.is_empty() {
            Vec::new()
        } else {
            let mut data = Vec::with_capacity(inputs.len() * input_len);
            for x in &inputs {
                data.extend_from_slice(x);
            }
            let mut shape = vec![inputs.len()];
            shape.extend_from_slice(&self.model.input_shape);
            self.model
                .forward_batch(&TensorND::new(shape, data).expect("dataset batch"))?
        };

        let mut per_input: Vec<InputBounds> = base_preds
            .iter()
            .enumerate()
            .map(|(i, pred)| {
                let dataset_label = dataset.labels.as_ref().map(|l| l[i]);
                let skipped = dataset_label.is_some_and(|l| l != pred.label);
                InputBounds {
                    id: dataset.ids[i].clone(),
                    dataset_label,
                    prediction: pred.clone(),
                    lower: 0,
                    upper: None,
                    best_adversarial: None,
                    converged: false,
                    skipped,
                }
            })
            .collect();

        let mut reports = Vec::new();
        for t in 1..=self.config.t_max {
            let active: Vec<usize> = per_input
                .iter()
                .enumerate()
                .filter(|(_, ib)| !ib.skipped && !ib.converged)
                .map(|(i, _)| i)
                .collect();

            if !active.is_empty() {
                let stepped: Vec<(usize, InputBounds, u64)> = active
                    .par_iter()
                    .map(|&i| {
                        let mut ib = per_input[i].clone();
                        let x0 = inputs[i];
                        let mode = match self.config.subspace_mode {
                            SubspaceMode::Exhaustive => SubspaceMode::Exhaustive,
                            SubspaceMode::Sampled { seed } => SubspaceMode::Sampled {
                                seed: seed_for(seed, i, t),
                            },
                        };
                        let sens = input_sensitivity(
                            self.model,
                            x0,
                            &ib.prediction,
                            t,
                            &self.grid,
                            mode,
                            self.config.cap,
                            self.config.chunk_rows,
                        )?;
                        let mut q = sens.queries;
                        q += self.lower_bound_step(&mut ib, x0, &sens, t)?;
                        if !ib.converged {
                            q += self.upper_bound_step(&mut ib, x0, &sens)?;
                        }
                        Ok((i, ib, q))
                    })
                    .collect::<Result<_, BoundsError>>()?;
                for (i, ib, q) in stepped {
                    per_input[i] = ib;
                    queries += q;
                }
            }

            let state = BoundsState {
                per_input: per_input.clone(),
                pixel_count: n,
                queries,
            };
            let wall = started.elapsed().as_secs_f64() * 1e3;
            let report = make_report(t, &state, Some(wall));
            sink(&report).map_err(|e| BoundsError::Emit {
                detail: e.to_string(),
            })?;
            reports.push(report);

            let all_done =
                per_input.iter().all(|ib| ib.skipped || ib.converged) && !per_input.is_empty();
            if all_done {
                break;
            }
        }

        Ok((
            reports,
            BoundsState {
                per_input,
                pixel_count: n,
                queries,
            },
        ))
    }
}

/// Builds the report snapshot for one completed iteration.
pub fn make_report(
    iteration: usize,
    state: &BoundsState,
    wall_time_ms: Option<f64>,
) -> AnytimeReport {
    let n = state.pixel_count;
    let inputs: Vec<InputReport> = state
        .per_input
        .iter()
        .map(|ib| InputReport {
            id: ib.id.clone(),
            original_label: ib.dataset_label,
            predicted_label: ib.prediction.label,
            lower: ib.lower,
            upper: ib.upper,
            converged: ib.converged,
            skipped: ib.skipped,
            u_c: (!ib.skipped).then(|| ib.u_c(n)),
            u_r: (!ib.skipped).then(|| ib.u_r(n)),
            adversarial_distance: ib.best_adversarial.as_ref().map(|a| a.weight()),
            perturbed_positions: ib
                .best_adversarial
                .as_ref()
                .map(|a| a.positions())
                .unwrap_or_default(),
        })
        .collect();

    let counted: Vec<&InputBounds> = state.per_input.iter().filter(|ib| !ib.skipped).collect();
    let mean = |values: Vec<f64>| {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let uppers: Vec<f64> = counted
        .iter()
        .filter_map(|ib| ib.upper)
        .map(|u| u as f64)
        .collect();
    let aggregate = Aggregate {
        mean_lower: mean(counted.iter().map(|ib| ib.lower as f64).collect()),
        mean_upper: mean(uppers),
        u_c: mean(counted.iter().map(|ib| ib.u_c(n)).collect()),
        u_r: mean(counted.iter().map(|ib| ib.u_r(n)).collect()),
        query_count: (!state.per_input.is_empty()).then_some(state.queries),
        wall_time_ms,
    };
    AnytimeReport {
        iteration,
        inputs,
        aggregate,
    }
}

/// Shrinks an adversarial perturbation to a 1-minimal one: repeated passes
/// over the remaining positions in ascending order, reverting any position
/// whose removal still changes the class, until a full pass removes nothing.
/// Returns the tightened perturbation and the queries spent.
pub fn tighten(
    model: &Model,
    x0: &[f64],
    adv: &SparsePerturbation,
) -> Result<(SparsePerturbation, u64), BoundsError> {
    let channels = model.channels();
    let base_label = model.forward_one(x0)?.label;
    let flipped = model.forward_one(&adv.applied(x0, channels))?.label != base_label;
    if !flipped {
        return Err(BoundsError::TightenPrecondition);
    }
    let (tight, q) = minimize_support(x0, adv, channels, |input| {
        Ok::<bool, BoundsError>(model.forward_one(input)?.label != base_label)
    })?;
    Ok((tight, 2 + q))
}

/// Removes positions from `adv` while `holds` stays true on the applied
/// input, scanning ascending positions per pass until a fixed point. The
/// caller guarantees `holds` is true for `adv` itself. Returns the reduced
/// perturbation and the number of `holds` evaluations.
pub(crate) fn minimize_support<E>(
    x0: &[f64],
    adv: &SparsePerturbation,
    channels: usize,
    mut holds: impl FnMut(&[f64]) -> Result<bool, E>,
) -> Result<(SparsePerturbation, u64), E> {
    let mut queries = 0u64;
    let mut current = adv.clone();
    loop {
        let mut removed = false;
        for pos in current.positions() {
            let trial = current.without(pos);
            if trial.is_empty() {
                continue; // the empty perturbation is the unperturbed input
            }
            queries += 1;
            if holds(&trial.applied(x0, channels))? {
                current = trial;
                removed = true;
            }
        }
        if !removed {
            return Ok((current, queries));
        }
    }
}

/// Exact worst-case number of network queries for certifying an `n`-pixel
/// input at grid tolerance `epsilon`: `(1 + ceil(1/epsilon))^n - 1`, the sum
/// over all nonzero perturbation weights of `C(n, d) * delta^d`.
pub fn worst_case_queries(n: usize, epsilon: f64) -> Result<BigUint, BoundsError> {
    if n == 0 || !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(BoundsError::BadQueryArgs { n, epsilon });
    }
    let delta = crate::sensitivity::ceil_recip(epsilon);
    let base = BigUint::from(delta + 1);
    Ok(base.pow(n as u32) - 1u32)
}
