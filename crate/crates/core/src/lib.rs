//! Anytime lower/upper bounds on the L0-norm maximum safe radius of small
//! feed-forward classifiers, with adaptations for adversarial attack
//! generation, neuron-coverage test generation and occlusion-style saliency
//! maps.
//!
//! The pipeline enumerates pixel subspaces of growing dimension, grids each
//! subspace, evaluates every candidate in batched forward passes, and turns
//! the resulting subspace sensitivities into a certified lower bound and a
//! witnessed upper bound per input. Both sequences converge to the exact
//! maximum safe radius on desk-scale inputs.

pub mod bounds;
pub mod infer;
pub mod io;
pub mod rng;
pub mod sensitivity;
pub mod tensor;

pub mod apps;

pub use bounds::{
    worst_case_queries, AnytimeReport, BoundsState, CheckMode, Engine, EvalConfig, InputBounds,
    InputReport,
};
pub use infer::{InferError, Layer, Model, NeuronId, Prediction};
pub use io::{load_dataset, load_model, save_model, Dataset, IoError};
pub use sensitivity::{
    GridConfig, InputSensitivity, SensitivityBatch, SubspaceIndex, SubspaceMode, SubspaceResult,
};
pub use tensor::{fold, min_along_first_axis, unfold_mode_n, SparsePerturbation, TensorND};

pub use apps::{attack, saliency, testgen, AttackResult, CoverageReport, SaliencyMap};
