//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid domain spec: {0}")]
    Spec(String),

    #[error("label {label} at pixel {pixel} is outside [0, {num_classes})")]
    Label {
        label: u32,
        pixel: usize,
        num_classes: usize,
    },

    #[error("mask value {value} at pixel {pixel} is not binary")]
    Mask { value: f64, pixel: usize },

    #[error("finite-difference oracle produced a non-finite value at coordinate {coordinate}")]
    OracleFailure { coordinate: usize },

    #[error("training diverged in {phase} at epoch {epoch}: {detail}")]
    TrainingDivergence {
        phase: String,
        epoch: usize,
        detail: String,
    },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("schedule error: iteration {iter} exceeds total {total}")]
    Schedule { iter: usize, total: usize },

    #[error("format error: expected magic {expected:?}, found {found:?}")]
    Format { expected: String, found: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("role mismatch: expected {expected} dataset, file holds {found}")]
    Role { expected: String, found: String },

    #[error("dataset has no labels")]
    MissingLabels,

    #[error("evaluation is empty: {0}")]
    EmptyEvaluation(String),

    #[error("no training signal: {0}")]
    NoSignal(String),

    #[error("ablation failed in arm {failed}; completed arms: {completed:?}: {source}")]
    PartialResults {
        failed: String,
        completed: Vec<String>,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_path(self, path: impl Into<PathBuf>) -> Self {
        Error::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
