use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {op} (limit {limit})")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("{op} expects a scalar, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("batch of {0} rows is too small for train-mode normalization (need at least 2)")]
    BatchTooSmall(usize),
    #[error("every row of the loss input is masked")]
    EmptyBatch,
    #[error("target row {row} sums to {sum}, expected 1")]
    InvalidTarget { row: usize, sum: f64 },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("source class {class} has no entry in label map '{map}'")]
    UnmappedClass { class: u16, map: String },
    #[error("unknown dataset id {id} (registry has {count})")]
    UnknownDataset { id: usize, count: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite gradient in parameter '{name}' at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("confusion matrix holds no counted points")]
    EmptyEvaluation,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
