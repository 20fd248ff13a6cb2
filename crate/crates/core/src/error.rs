use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unsupported dtype `{dtype}` for tensor `{tensor}`")]
    UnsupportedDtype { tensor: String, dtype: String },

    #[error("shape mismatch for tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("non-finite value in tensor `{tensor}`")]
    NonFinite { tensor: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("token id {id} out of range (vocab size {vocab_size}) in sequence {sequence}")]
    TokenOutOfRange {
        sequence: usize,
        id: u32,
        vocab_size: usize,
    },

    #[error("empty token batch")]
    EmptyBatch,

    #[error(
        "infeasible FLOPs budget {budget}: attention-only floor is {floor_fraction:.6} of dense ({floor} FLOPs)"
    )]
    InfeasibleBudget {
        budget: f64,
        floor: u64,
        floor_fraction: f64,
    },

    #[error("strategy `{0}` requires an activation capture")]
    MissingCapture(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(tensor: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            tensor: tensor.into(),
            detail: detail.into(),
        }
    }
}
