//! Forward inference for layered feed-forward classifiers.
//!
//! Models are immutable after load and shareable across threads. Batches may
//! be split into chunks and evaluated concurrently: the arithmetic order
//! within one input is fixed, so chunking never changes results.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::TensorND;

/// Errors from model validation and inference.
#[derive(Debug, Clone, PartialEq)]
pub enum InferError {
    /// A layer's parameters or input shape are inconsistent. Names the layer.
    LayerShape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    /// The model as a whole is unusable (e.g. too few output classes).
    Model { detail: String },
    /// A batch or input does not match the model input shape.
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An input carries NaN or infinite values.
    NonFiniteInput { index: usize },
}

impl fmt::Display for InferError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LayerShape {
                layer,
                kind,
                detail,
            } => {
                write!(f, "layer {layer} ({kind}): {detail}")
            }
            Self::Model { detail } => write!(f, "invalid model: {detail}"),
            Self::InputShape { expected, got } => {
                write!(
                    f,
                    "input shape {got:?} does not match model input {expected:?}"
                )
            }
            Self::NonFiniteInput { index } => {
                write!(f, "input {index} contains non-finite values")
            }
        }
    }
}

impl std::error::Error for InferError {}

/// One layer of a feed-forward classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    /// Fully connected layer; `weights` is `m_out x m_in`, row-major.
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    /// 2-D convolution with valid padding; kernels are `[out][in][kh][kw]`.
    Conv2d {
        kernels: Vec<Vec<Vec<Vec<f64>>>>,
        bias: Vec<f64>,
        stride: usize,
    },
    Relu,
    Batchnorm {
        mean: Vec<f64>,
        variance: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        eps: f64,
    },
    Maxpool {
        window: [usize; 2],
    },
    Flatten,
    Softmax,
    /// Identity at inference time.
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Batchnorm { .. } => "batchnorm",
            Layer::Maxpool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
            Layer::Dropout { .. } => "dropout",
        }
    }
}

/// A layered feed-forward classifier with recordable hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub name: String,
    /// `[height, width, channels]` for images (channels-last) or `[n]` flat.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Identifies a hidden neuron: the index of its activation layer and the
/// offset within that layer's output. Stable across calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub offset: usize,
}

/// Classifier output for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Confidence per class, post-softmax when the model ends in one.
    pub confidences: Vec<f64>,
    /// Smallest index attaining the maximal confidence.
    pub label: usize,
}

impl Prediction {
    fn from_output(confidences: Vec<f64>) -> Self {
        let mut label = 0;
        for (i, &c) in confidences.iter().enumerate() {
            if c > confidences[label] {
                label = i;
            }
        }
        Self { confidences, label }
    }
}

impl Model {
    /// Builds and validates a model.
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
    ) -> Result<Self, InferError> {
        let model = Self {
            name: name.into(),
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Walks shapes through every layer, checking parameter consistency, and
    /// that the final layer produces at least two class scores.
    pub fn validate(&self) -> Result<(), InferError> {
        let shapes = self.layer_shapes()?;
        let out = shapes.last().unwrap_or(&self.input_shape);
        if out.len() != 1 || out[0] < 2 {
            return Err(InferError::Model {
                detail: format!(
                    "final layer must produce at least 2 class scores, got shape {out:?}"
                ),
            });
        }
        Ok(())
    }

    /// Number of elements of one input.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Channels per spatial pixel: the last extent of an `[h, w, c]` input, 1
    /// for flat inputs.
    pub fn channels(&self) -> usize {
        if self.input_shape.len() == 3 {
            self.input_shape[2]
        } else {
            1
        }
    }

    /// Number of spatial pixel positions; one L0 unit each.
    pub fn pixel_count(&self) -> usize {
        self.input_len() / self.channels()
    }

    /// Spatial shape of the input: `[h, w]` for images, `[n]` for flat inputs.
    pub fn spatial_shape(&self) -> Vec<usize> {
        if self.input_shape.len() == 3 {
            self.input_shape[..2].to_vec()
        } else {
            self.input_shape.clone()
        }
    }

    /// Number of classes produced by the final layer.
    pub fn num_classes(&self) -> Result<usize, InferError> {
        let shapes = self.layer_shapes()?;
        Ok(shapes.last().map(|s| s[0]).unwrap_or(0))
    }

    /// Shape after each layer, starting from `input_shape`.
    fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, InferError> {
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(InferError::Model {
                detail: format!("bad input shape {shape:?}"),
            });
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = next_shape(i, layer, &shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Runs the whole batch through the network. The first axis of `batch` is
    /// the batch size; the remaining axes must match `input_shape`. Identical
    /// inputs yield bitwise-identical outputs regardless of how the batch is
    /// partitioned.
    pub fn forward_batch(&self, batch: &TensorND) -> Result<Vec<Prediction>, InferError> {
        if batch.rank() < 1 || batch.shape()[1..] != *self.input_shape.as_slice() {
            return Err(InferError::InputShape {
                expected: self.input_shape.clone(),
                got: batch.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let rows = batch.shape()[0];
        let row_len = self.input_len();
        let data = batch.data();
        (0..rows)
            .into_par_iter()
            .map(|r| {
                let input = &data[r * row_len..(r + 1) * row_len];
                if input.iter().any(|v| !v.is_finite()) {
                    return Err(InferError::NonFiniteInput { index: r });
                }
                Ok(Prediction::from_output(self.run_layers(input, None)?))
            })
            .collect()
    }

    /// Single-input forward pass.
    pub fn forward_one(&self, input: &[f64]) -> Result<Prediction, InferError> {
        if input.len() != self.input_len() {
            return Err(InferError::InputShape {
                expected: self.input_shape.clone(),
                got: vec![input.len()],
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(InferError::NonFiniteInput { index: 0 });
        }
        Ok(Prediction::from_output(self.run_layers(input, None)?))
    }

    /// Post-activation values of every hidden neuron for one input, paired
    /// with stable ids. Hidden neurons are the outputs of activation (relu)
    /// layers.
    pub fn record_activations(&self, input: &[f64]) -> Result<Vec<(NeuronId, f64)>, InferError> {
        let mut recorded = Vec::new();
        if input.len() != self.input_len() {
            return Err(InferError::InputShape {
                expected: self.input_shape.clone(),
                got: vec![input.len()],
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(InferError::NonFiniteInput { index: 0 });
        }
        self.run_layers(input, Some(&mut recorded))?;
        Ok(recorded)
    }

    /// Pre-activation inputs of every hidden (relu) layer, keyed like
    /// [`Model::record_activations`]. Used to pick seeds for uncovered
    /// neurons.
    pub fn pre_activation_values(&self, input: &[f64]) -> Result<Vec<(NeuronId, f64)>, InferError> {
        let shapes = self.layer_shapes()?;
        let mut out = Vec::new();
        let mut buf = input.to_vec();
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                for (offset, &v) in buf.iter().enumerate() {
                    out.push((NeuronId { layer: i, offset }, v));
                }
            }
            buf = apply_layer(i, layer, &buf, &shape)?;
            shape = shapes[i].clone();
        }
        Ok(out)
    }

    /// Total number of hidden neurons (relu layer outputs).
    pub fn hidden_neuron_count(&self) -> Result<usize, InferError> {
        let shapes = self.layer_shapes()?;
        let mut count = 0;
        let mut prev = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                count += prev.iter().product::<usize>();
            }
            prev = shapes[i].clone();
        }
        Ok(count)
    }

    /// Upper bound `K` on the Lipschitz constant of the pre-softmax map under
    /// the infinity norm: the product over layers of per-layer operator-norm
    /// bounds. Softmax itself is 1-Lipschitz in that norm, so `K` also bounds
    /// the post-softmax confidences.
    pub fn lipschitz_upper_bound(&self) -> Result<f64, InferError> {
        let mut k = 1.0f64;
        for layer in &self.layers {
            let factor = match layer {
                Layer::Dense { weights, .. } => weights
                    .iter()
                    .map(|row| row.iter().map(|w| w.abs()).sum::<f64>())
                    .fold(0.0, f64::max),
                Layer::Conv2d { kernels, .. } => kernels
                    .iter()
                    .map(|per_out| {
                        per_out
                            .iter()
                            .flat_map(|per_in| per_in.iter().flatten())
                            .map(|w| w.abs())
                            .sum::<f64>()
                    })
                    .fold(0.0, f64::max),
                Layer::Batchnorm {
                    variance,
                    gamma,
                    eps,
                    ..
                } => gamma
                    .iter()
                    .zip(variance)
                    .map(|(g, v)| g.abs() / (v + eps).sqrt())
                    .fold(0.0, f64::max),
                Layer::Relu | Layer::Maxpool { .. } | Layer::Flatten | Layer::Dropout { .. } => 1.0,
                Layer::Softmax => continue,
            };
            k *= factor;
        }
        Ok(k)
    }

    fn run_layers(
        &self,
        input: &[f64],
        mut record: Option<&mut Vec<(NeuronId, f64)>>,
    ) -> Result<Vec<f64>, InferError> {
        let mut buf = input.to_vec();
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            buf = apply_layer(i, layer, &buf, &shape)?;
            shape = next_shape(i, layer, &shape)?;
            if matches!(layer, Layer::Relu) {
                if let Some(rec) = record.as_deref_mut() {
                    for (offset, &v) in buf.iter().enumerate() {
                        rec.push((NeuronId { layer: i, offset }, v));
                    }
                }
            }
        }
        Ok(buf)
    }
}

fn err(layer: usize, kind: &'static str, detail: String) -> InferError {
    InferError::LayerShape {
        layer,
        kind,
        detail,
    }
}

/// Output shape of `layer` given its input shape, with parameter checks.
fn next_shape(i: usize, layer: &Layer, shape: &[usize]) -> Result<Vec<usize>, InferError> {
    match layer {
        Layer::Dense { weights, bias } => {
            if shape.len() != 1 {
                return Err(err(
                    i,
                    "dense",
                    format!("needs a flat input, got shape {shape:?}"),
                ));
            }
            let m_out = weights.len();
            if m_out == 0 {
                return Err(err(i, "dense", "empty weight matrix".into()));
            }
            let m_in = weights[0].len();
            if weights.iter().any(|row| row.len() != m_in) {
                return Err(err(i, "dense", "ragged weight matrix".into()));
            }
            if m_in != shape[0] {
                return Err(err(
                    i,
                    "dense",
                    format!("weights expect {m_in} inputs, got {}", shape[0]),
                ));
            }
            if bias.len() != m_out {
                return Err(err(
                    i,
                    "dense",
                    format!("bias length {} does not match {m_out} rows", bias.len()),
                ));
            }
            Ok(vec![m_out])
        }
        Layer::Conv2d {
            kernels,
            bias,
            stride,
        } => {
            if shape.len() != 3 {
                return Err(err(
                    i,
                    "conv2d",
                    format!("needs an [h, w, c] input, got shape {shape:?}"),
                ));
            }
            let (h, w, c_in) = (shape[0], shape[1], shape[2]);
            if *stride == 0 {
                return Err(err(i, "conv2d", "stride must be at least 1".into()));
            }
            let c_out = kernels.len();
            if c_out == 0 {
                return Err(err(i, "conv2d", "no kernels".into()));
            }
            let (kc, kh, kw) = (
                kernels[0].len(),
                kernels[0][0].len(),
                kernels[0][0][0].len(),
            );
            for per_out in kernels {
                if per_out.len() != kc
                    || per_out
                        .iter()
                        .any(|p| p.len() != kh || p.iter().any(|r| r.len() != kw))
                {
                    return Err(err(i, "conv2d", "ragged kernel array".into()));
                }
            }
            if kc != c_in {
                return Err(err(
                    i,
                    "conv2d",
                    format!("kernels expect {kc} input channels, got {c_in}"),
                ));
            }
            if bias.len() != c_out {
                return Err(err(
                    i,
                    "conv2d",
                    format!("bias length {} does not match {c_out} kernels", bias.len()),
                ));
            }
            if kh > h || kw > w {
                return Err(err(
                    i,
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ));
            }
            Ok(vec![(h - kh) / stride + 1, (w - kw) / stride + 1, c_out])
        }
        Layer::Relu | Layer::Dropout { .. } => Ok(shape.to_vec()),
        Layer::Batchnorm {
            mean,
            variance,
            gamma,
            beta,
            eps,
        } => {
            let total: usize = shape.iter().product();
            let per_channel = *shape.last().unwrap();
            let len = mean.len();
            if len != per_channel && len != total {
                return Err(err(
                    i,
                    "batchnorm",
                    format!("parameter length {len} matches neither channels {per_channel} nor size {total}"),
                ));
            }
            if variance.len() != len || gamma.len() != len || beta.len() != len {
                return Err(err(
                    i,
                    "batchnorm",
                    "parameter arrays differ in length".into(),
                ));
            }
            if variance.iter().any(|v| v + eps <= 0.0) {
                return Err(err(
                    i,
                    "batchnorm",
                    "variance + eps must be positive".into(),
                ));
            }
            Ok(shape.to_vec())
        }
        Layer::Maxpool { window } => {
            if shape.len() != 3 {
                return Err(err(
                    i,
                    "maxpool",
                    format!("needs an [h, w, c] input, got shape {shape:?}"),
                ));
            }
            let [ph, pw] = *window;
            if ph == 0 || pw == 0 || ph > shape[0] || pw > shape[1] {
                return Err(err(
                    i,
                    "maxpool",
                    format!(
                        "window {ph}x{pw} invalid for input {}x{}",
                        shape[0], shape[1]
                    ),
                ));
            }
            Ok(vec![shape[0] / ph, shape[1] / pw, shape[2]])
        }
        Layer::Flatten => Ok(vec![shape.iter().product()]),
        Layer::Softmax => {
            if shape.len() != 1 {
                return Err(err(
                    i,
                    "softmax",
                    format!("needs a flat input, got shape {shape:?}"),
                ));
            }
            Ok(shape.to_vec())
        }
    }
}

fn apply_layer(
    i: usize,
    layer: &Layer,
    input: &[f64],
    shape: &[usize],
) -> Result<Vec<f64>, InferError> {
    match layer {
        Layer::Dense { weights, bias } => Ok(weights
            .iter()
            .zip(bias)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()),
        Layer::Conv2d {
            kernels,
            bias,
            stride,
        } => {
            let (h, w, c_in) = (shape[0], shape[1], shape[2]);
            let kh = kernels[0][0].len();
            let kw = kernels[0][0][0].len();
            let oh = (h - kh) / stride + 1;
            let ow = (w - kw) / stride + 1;
            let c_out = kernels.len();
            let mut out = vec![0.0; oh * ow * c_out];
            for y in 0..oh {
                for x in 0..ow {
                    for (o, kernel) in kernels.iter().enumerate() {
                        let mut acc = bias[o];
                        for (ci, plane) in kernel.iter().enumerate() {
                            for (dy, row) in plane.iter().enumerate() {
                                for (dx, &k) in row.iter().enumerate() {
                                    let iy = y * stride + dy;
                                    let ix = x * stride + dx;
                                    acc += k * input[(iy * w + ix) * c_in + ci];
                                }
                            }
                        }
                        out[(y * ow + x) * c_out + o] = acc;
                    }
                }
            }
            Ok(out)
        }
        Layer::Relu => Ok(input.iter().map(|&v| v.max(0.0)).collect()),
        Layer::Batchnorm {
            mean,
            variance,
            gamma,
            beta,
            eps,
        } => {
            let per_channel = *shape.last().unwrap();
            let channelwise = mean.len() == per_channel && mean.len() != input.len();
            Ok(input
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let p = if channelwise { j % per_channel } else { j };
                    gamma[p] * (v - mean[p]) / (variance[p] + eps).sqrt() + beta[p]
                })
                .collect())
        }
        Layer::Maxpool { window } => {
            let (h, w, c) = (shape[0], shape[1], shape[2]);
            let [ph, pw] = *window;
            let oh = h / ph;
            let ow = w / pw;
            let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..ph {
                            for dx in 0..pw {
                                let v = input[((y * ph + dy) * w + (x * pw + dx)) * c + ch];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(y * ow + x) * c + ch] = best;
                    }
                }
            }
            Ok(out)
        }
        Layer::Flatten | Layer::Dropout { .. } => Ok(input.to_vec()),
        Layer::Softmax => {
            let max = input.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = input.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            if sum <= 0.0 || !sum.is_finite() {
                return Err(err(i, "softmax", "degenerate softmax input".into()));
            }
            Ok(exps.iter().map(|e| e / sum).collect())
        }
    }
}
