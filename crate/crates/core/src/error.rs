use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid shape {0:?}: dimensions must be positive")]
    EmptyShape((usize, usize)),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: (usize, usize) },

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("expected a scalar (1x1) loss, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("unknown tape variable {0}")]
    UnknownVar(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid adapter: {0}")]
    Adapter(String),

    #[error("unsupported adapter kind for {op}: {kind}")]
    UnsupportedKind { op: &'static str, kind: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (lr {lr}): loss {loss}")]
    Diverged { step: usize, lr: f64, loss: f64 },

    #[error("empty subset: {0}")]
    EmptySubset(&'static str),

    #[error("accuracy gate failed: {what} = {value:.4} < {threshold:.4}")]
    Gate {
        what: String,
        value: f64,
        threshold: f64,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
