//! Dense N-dimensional tensors and the sparse perturbation algebra.
//!
//! `TensorND` is the carrier for inputs, candidate grids and batched network
//! outputs. `SparsePerturbation` records which pixels of an input are replaced
//! and by what value; its set operations (`remove`, `intersect`, `union`) are
//! the building blocks of the upper-bound accumulation.

use std::collections::BTreeMap;
use std::fmt;

/// Errors from tensor construction and reshaping.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Flat data length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// A shape extent is zero.
    ZeroExtent { axis: usize },
    /// An axis index is outside `0..rank`.
    AxisOutOfRange { axis: usize, rank: usize },
    /// A fold target is incompatible with the given matrix.
    FoldShape { detail: String },
    /// `min_along_first_axis` needs at least one axis.
    RankTooLow { rank: usize, required: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DataLength { expected, got } => {
                write!(
                    f,
                    "data length {got} does not match shape product {expected}"
                )
            }
            Self::ZeroExtent { axis } => write!(f, "shape extent at axis {axis} is zero"),
            Self::AxisOutOfRange { axis, rank } => {
                write!(f, "axis {axis} out of range for rank-{rank} tensor")
            }
            Self::FoldShape { detail } => write!(f, "fold shape mismatch: {detail}"),
            Self::RankTooLow { rank, required } => {
                write!(f, "rank {rank} too low, need at least {required}")
            }
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense N-dimensional numeric array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorND {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorND {
    /// Builds a tensor, checking that `data.len()` equals the shape product
    /// and that every extent is at least 1.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { axis });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor over the given values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let shape = vec![data.len()];
        Self { shape, data }
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element at a multi-index.
    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.rank());
        self.data[self.flat_index(index)]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(TensorError::ZeroExtent { axis });
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        flat
    }
}

/// Mode-n unfolding: maps element `(i_0, ..., i_{N-1})` to row `i_n` and
/// column equal to the row-major rank of the remaining indices in their
/// original axis order. The result is a rank-2 tensor of shape
/// `[extent(n), len / extent(n)]`.
pub fn unfold_mode_n(t: &TensorND, n: usize) -> Result<TensorND, TensorError> {
    let rank = t.rank();
    if n >= rank {
        return Err(TensorError::AxisOutOfRange { axis: n, rank });
    }
    let rows = t.shape[n];
    let cols = t.len() / rows;
    let mut out = vec![0.0; t.len()];
    let mut index = vec![0usize; rank];
    for &value in &t.data {
        let row = index[n];
        let mut col = 0;
        for (axis, &ix) in index.iter().enumerate() {
            if axis != n {
                col = col * t.shape[axis] + ix;
            }
        }
        out[row * cols + col] = value;
        // advance the row-major multi-index
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < t.shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    TensorND::new(vec![rows, cols], out)
}

/// Folds a mode-n unfolded matrix back into a tensor of `target_shape`.
/// Inverse of [`unfold_mode_n`]: `fold(unfold_mode_n(t, n), t.shape(), n) == t`.
pub fn fold(m: &TensorND, target_shape: &[usize], n: usize) -> Result<TensorND, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::FoldShape {
            detail: format!("expected a rank-2 matrix, got rank {}", m.rank()),
        });
    }
    if n >= target_shape.len() {
        return Err(TensorError::AxisOutOfRange {
            axis: n,
            rank: target_shape.len(),
        });
    }
    let expected: usize = target_shape.iter().product();
    if m.len() != expected {
        return Err(TensorError::FoldShape {
            detail: format!(
                "matrix has {} elements, target shape needs {expected}",
                m.len()
            ),
        });
    }
    if m.shape[0] != target_shape[n] {
        return Err(TensorError::FoldShape {
            detail: format!(
                "matrix has {} rows, target extent at axis {n} is {}",
                m.shape[0], target_shape[n]
            ),
        });
    }
    let cols = m.shape[1];
    let mut out = vec![0.0; expected];
    let rank = target_shape.len();
    let mut index = vec![0usize; rank];
    for slot in out.iter_mut() {
        let row = index[n];
        let mut col = 0;
        for (axis, &ix) in index.iter().enumerate() {
            if axis != n {
                col = col * target_shape[axis] + ix;
            }
        }
        *slot = m.data[row * cols + col];
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < target_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    TensorND::new(target_shape.to_vec(), out)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(m: &TensorND) -> Result<TensorND, TensorError> {
    if m.rank() != 2 {
        return Err(TensorError::RankTooLow {
            rank: m.rank(),
            required: 2,
        });
    }
    let (rows, cols) = (m.shape[0], m.shape[1]);
    let mut out = vec![0.0; m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m.data[r * cols + c];
        }
    }
    TensorND::new(vec![cols, rows], out)
}

/// Minimum over the first axis, with argmin indices. Ties resolve to the
/// smallest index along the first axis.
pub fn min_along_first_axis(t: &TensorND) -> Result<(TensorND, Vec<usize>), TensorError> {
    if t.rank() < 1 {
        return Err(TensorError::RankTooLow {
            rank: 0,
            required: 1,
        });
    }
    let first = t.shape[0];
    let inner = t.len() / first;
    let mut values = t.data[..inner].to_vec();
    let mut argmin = vec![0usize; inner];
    for i in 1..first {
        let row = &t.data[i * inner..(i + 1) * inner];
        for (j, &v) in row.iter().enumerate() {
            if v < values[j] {
                values[j] = v;
                argmin[j] = i;
            }
        }
    }
    let out = TensorND::new(t.shape[1..].to_vec(), values)?;
    Ok((out, argmin))
}

/// Sparse replacement of pixel values: a map from flat pixel position to the
/// replacement value in `[0, 1]`. The L0 weight of the perturbation is the
/// number of entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsePerturbation {
    entries: BTreeMap<usize, f64>,
}

impl SparsePerturbation {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = (usize, f64)>>(entries: I) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    /// Number of perturbed pixel positions (the L0 weight).
    pub fn weight(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, position: usize, value: f64) {
        self.entries.insert(position, value);
    }

    pub fn get(&self, position: usize) -> Option<f64> {
        self.entries.get(&position).copied()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries.contains_key(&position)
    }

    /// Entries in ascending position order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&p, &v)| (p, v))
    }

    /// Perturbed positions in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Copy of `self` without one position.
    pub fn without(&self, position: usize) -> Self {
        let mut entries = self.entries.clone();
        entries.remove(&position);
        Self { entries }
    }

    /// Keeps the entries of `self` whose positions are absent from `other`;
    /// removal is by position only, values in `other` are irrelevant.
    pub fn remove(&self, other: &Self) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(p, _)| !other.entries.contains_key(p))
            .map(|(&p, &v)| (p, v))
            .collect();
        Self { entries }
    }

    /// Keeps positions present in both operands whose values are exactly
    /// equal (the operands' values come from one finite grid).
    pub fn intersect(&self, other: &Self) -> Self {
        let entries = self
            .entries
            .iter()
            .filter(|(p, v)| other.entries.get(p) == Some(v))
            .map(|(&p, &v)| (p, v))
            .collect();
        Self { entries }
    }

    /// Merges two perturbations; on a conflicting position the value from
    /// `other` wins, so `a.union(&b)` is the result of applying `a` then `b`.
    pub fn union(&self, other: &Self) -> Self {
        let mut entries = self.entries.clone();
        for (&p, &v) in &other.entries {
            entries.insert(p, v);
        }
        Self { entries }
    }

    /// Applies the perturbation to a flat input buffer. A position covers all
    /// `channels` interleaved values at that spatial pixel.
    pub fn apply_to(&self, pixels: &mut [f64], channels: usize) {
        for (&p, &v) in &self.entries {
            let base = p * channels;
            for c in 0..channels {
                pixels[base + c] = v;
            }
        }
    }

    /// The input obtained by applying the perturbation to `x0`.
    pub fn applied(&self, x0: &[f64], channels: usize) -> Vec<f64> {
        let mut out = x0.to_vec();
        self.apply_to(&mut out, channels);
        out
    }
}
