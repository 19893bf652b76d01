//! On-disk artifacts: the versioned JSON model file and sample CSVs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::config::RunConfig;
use crate::coupling::Stage;
use crate::flows::Model;
use crate::train::TrainHistory;

pub const MODEL_FORMAT: &str = "isrflow-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("not a model file (format `{0}`)")]
    Format(String),
    #[error("model file version {found} is not supported (expected {MODEL_VERSION})")]
    Version { found: u32 },
    #[error("model file is inconsistent: {0}")]
    Inconsistent(String),
    #[error("row {row} has {got} fields, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("row {row}, column {col}: `{text}` is not a number")]
    Number { row: usize, col: usize, text: String },
}

/// Summary of a training run stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryDigest {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub final_penalty: Option<f64>,
    pub nonzero_weights: Option<usize>,
}

impl From<&TrainHistory> for HistoryDigest {
    fn from(h: &TrainHistory) -> Self {
        let last = h.records.last();
        Self {
            epochs: h.records.len(),
            final_loss: last.map(|r| r.loss),
            final_penalty: last.map(|r| r.penalty),
            nonzero_weights: last.map(|r| r.nonzero_weights),
        }
    }
}

/// Everything needed to reload a trained model and rerun its training:
/// the config snapshot, every weight, permutation and activation list, and
/// a digest of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub history: HistoryDigest,
    pub model: Model,
}

impl ModelFile {
    pub fn new(config: RunConfig, model: Model, history: HistoryDigest) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config,
            history,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String, IoError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let file: Self = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(IoError::Format(file.format));
        }
        if file.version != MODEL_VERSION {
            return Err(IoError::Version { found: file.version });
        }
        file.check()?;
        Ok(file)
    }

    fn check(&self) -> Result<(), IoError> {
        let stack = self.model.stack();
        if stack.padding > stack.width {
            return Err(IoError::Inconsistent("padding exceeds stack width".into()));
        }
        for stage in &stack.stages {
            let ok = match stage {
                Stage::Coupling(b) => b.width == stack.width && b.condition_width == stack.condition_width,
                Stage::Permutation(p) => p.width() == stack.width,
            };
            if !ok {
                return Err(IoError::Inconsistent("stage width differs from stack width".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut text = String::new();
        BufReader::new(File::open(path)?).read_to_string(&mut text)?;
        Self::from_json(&text)
    }
}

/// Writes through a sibling temporary file and a rename, so a crash never
/// leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `m` as CSV with a header row. Numbers use the shortest text that
/// parses back to the same `f64`.
pub fn write_matrix_csv<W: Write>(out: W, header: &[String], m: &Matrix) -> Result<(), IoError> {
    if header.len() != m.ncols() {
        return Err(IoError::Inconsistent(format!(
            "{} column names for {} columns",
            header.len(),
            m.ncols()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    let mut buf = Vec::with_capacity(m.ncols());
    for row in m.rows() {
        buf.clear();
        buf.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_matrix_csv(path: &Path, header: &[String], m: &Matrix) -> Result<(), IoError> {
    let mut bytes = Vec::new();
    write_matrix_csv(&mut bytes, header, m)?;
    write_atomic(path, &bytes)
}

/// Reads a numeric CSV with a header row.
pub fn read_matrix_csv<R: Read>(input: R) -> Result<(Vec<String>, Matrix), IoError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(IoError::Ragged {
                row: i + 1,
                got: rec.len(),
                expected: header.len(),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| IoError::Number {
                row: i + 1,
                col: j + 1,
                text: field.to_string(),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), data).expect("rows checked to be uniform");
    Ok((header, m))
}

pub fn load_matrix_csv(path: &Path) -> Result<(Vec<String>, Matrix), IoError> {
    read_matrix_csv(BufReader::new(File::open(path)?))
}

/// `prefix_1, …, prefix_n`.
pub fn column_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}
