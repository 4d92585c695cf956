use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("empty reduction along axis {axis}")]
    EmptyAxis { axis: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("undefined metric: {0}")]
    Metric(String),

    #[error("accumulator for `{path}` is not positive semidefinite (min eigenvalue {min_eig:e})")]
    NotPsd { path: String, min_eig: f64 },

    #[error("eigendecomposition failed for `{path}`: {reason}")]
    Eigen { path: String, reason: String },

    #[error("no quantizer fitted for tensor `{0}`")]
    MissingQuantizer(String),

    #[error("corrupt tensor file {path}: {reason}")]
    TensorFormat { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
