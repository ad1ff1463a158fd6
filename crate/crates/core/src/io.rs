//! Model and dataset files, report documents, saliency graymaps and
//! adversarial CSV rows.
//!
//! Models are single JSON documents with a layer list; numeric arrays are
//! nested lists of decimals, hand-writable for desk-scale tests. Datasets are
//! CSV with rows `label,p1,...,pn` or `p1,...,pn`, values already normalized
//! to [0, 1]. Saliency maps are written as ASCII PGM (P2) with max value 255.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bounds::AnytimeReport;
use crate::infer::{InferError, Model};
use crate::tensor::TensorND;

#[derive(Debug)]
pub enum IoError {
    /// Filesystem failure.
    Io { path: PathBuf, detail: String },
    /// The file is not valid JSON for the expected schema.
    Parse { path: PathBuf, detail: String },
    /// The parsed model is internally inconsistent.
    Model(InferError),
    /// A CSV row does not fit the dataset format. Rows are 1-based.
    MalformedRow {
        path: PathBuf,
        row: usize,
        detail: String,
    },
    /// A pixel value is outside [0, 1]. Rows are 1-based.
    ValueOutOfRange {
        path: PathBuf,
        row: usize,
        value: f64,
    },
}

impl fmt::Display for IoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io { path, detail } => write!(f, "{}: {detail}", path.display()),
            Self::Parse { path, detail } => write!(f, "{}: {detail}", path.display()),
            Self::Model(e) => write!(f, "{e}"),
            Self::MalformedRow { path, row, detail } => {
                write!(f, "{}: row {row}: {detail}", path.display())
            }
            Self::ValueOutOfRange { path, row, value } => {
                write!(
                    f,
                    "{}: row {row}: value {value} outside [0, 1]",
                    path.display()
                )
            }
        }
    }
}

impl std::error::Error for IoError {}

impl From<InferError> for IoError {
    fn from(e: InferError) -> Self {
        Self::Model(e)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> IoError {
    IoError::Io {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Loads and validates a model from a JSON document.
pub fn load_model(path: impl AsRef<Path>) -> Result<Model, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let model: Model = serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    model.validate()?;
    Ok(model)
}

/// Writes a model as JSON; `load_model` restores it bitwise.
pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<(), IoError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(model).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    atomic_write(path, format!("{text}\n").as_bytes())
}

/// A set of inputs with optional labels and stable per-input ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Flat pixel vectors in [0, 1]; reshaped to the model input shape on use.
    pub inputs: Vec<TensorND>,
    pub labels: Option<Vec<usize>>,
    pub ids: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Loads a CSV dataset. `values_per_input` decides whether rows carry a
/// leading label column; the first row fixes the layout for the whole file.
/// An empty file is an empty dataset, not an error.
pub fn load_dataset(path: impl AsRef<Path>, values_per_input: usize) -> Result<Dataset, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut inputs = Vec::new();
    let mut labels: Option<Vec<usize>> = None;
    let mut ids = Vec::new();
    let mut labeled: Option<bool> = None;

    for (row_idx, line) in text.lines().enumerate() {
        let row = row_idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let has_label = match fields.len() {
            l if l == values_per_input + 1 => true,
            l if l == values_per_input => false,
            l => {
                return Err(IoError::MalformedRow {
                    path: path.to_path_buf(),
                    row,
                    detail: format!(
                        "{l} fields, expected {values_per_input} or {}",
                        values_per_input + 1
                    ),
                })
            }
        };
        match labeled {
            None => {
                labeled = Some(has_label);
                if has_label {
                    labels = Some(Vec::new());
                }
            }
            Some(expected) if expected != has_label => {
                return Err(IoError::MalformedRow {
                    path: path.to_path_buf(),
                    row,
                    detail: "inconsistent column count across rows".into(),
                })
            }
            _ => {}
        }

        let mut values = fields.as_slice();
        if has_label {
            let label: usize = values[0].parse().map_err(|_| IoError::MalformedRow {
                path: path.to_path_buf(),
                row,
                detail: format!("label {:?} is not a nonnegative integer", values[0]),
            })?;
            labels.as_mut().unwrap().push(label);
            values = &values[1..];
        }
        let mut pixels = Vec::with_capacity(values_per_input);
        for field in values {
            let v: f64 = field.parse().map_err(|_| IoError::MalformedRow {
                path: path.to_path_buf(),
                row,
                detail: format!("{field:?} is not a number"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(IoError::ValueOutOfRange {
                    path: path.to_path_buf(),
                    row,
                    value: v,
                });
            }
            pixels.push(v);
        }
        ids.push((inputs.len()).to_string());
        inputs.push(TensorND::from_vec(pixels));
    }

    Ok(Dataset {
        inputs,
        labels,
        ids,
    })
}

/// Writes one report document as pretty JSON. The write is atomic (temp file
/// plus rename), so a killed run never leaves a truncated report behind.
pub fn write_report(path: impl AsRef<Path>, report: &AnytimeReport) -> Result<(), IoError> {
    write_json(path, report)
}

/// Writes any serializable document as pretty JSON, atomically.
pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    atomic_write(path, format!("{text}\n").as_bytes())
}

/// Writes a nonnegative map as an ASCII graymap (PGM P2), linearly scaled to
/// 0..=255. An all-zero map stays all-zero. Rank-1 maps become a single-row
/// image.
pub fn write_saliency(path: impl AsRef<Path>, map: &TensorND) -> Result<(), IoError> {
    let path = path.as_ref();
    let (height, width) = match map.shape() {
        [h, w] => (*h, *w),
        [n] => (1usize, *n),
        other => {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                detail: format!("saliency map must be rank 1 or 2, got shape {other:?}"),
            })
        }
    };
    let max = map.data().iter().fold(0.0f64, |a, &b| a.max(b));
    let mut text = format!("P2\n{width} {height}\n255\n");
    for r in 0..height {
        let row: Vec<String> = (0..width)
            .map(|c| {
                let v = map.data()[r * width + c];
                let scaled = if max > 0.0 {
                    (v / max * 255.0).round() as u32
                } else {
                    0
                };
                scaled.min(255).to_string()
            })
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Appends one input as a CSV row in the dataset format. Values use the
/// shortest representation that parses back to the same number, so rows
/// round-trip through `load_dataset` losslessly.
pub fn write_adversarial(path: impl AsRef<Path>, input: &[f64]) -> Result<(), IoError> {
    append_csv_row(path, input, None)
}

/// Appends a CSV row with an optional leading label.
pub fn append_csv_row(
    path: impl AsRef<Path>,
    values: &[f64],
    label: Option<usize>,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut fields: Vec<String> = Vec::with_capacity(values.len() + 1);
    if let Some(l) = label {
        fields.push(l.to_string());
    }
    fields.extend(values.iter().map(|v| v.to_string()));
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    writeln!(file, "{}", fields.join(",")).map_err(|e| io_err(path, e))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}
