use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid score vector: {0}")]
    InvalidScores(String),

    #[error("label index {label} out of range (expected < {limit})")]
    InvalidLabel { label: usize, limit: usize },

    #[error("cost must lie in the open interval (0, 1), got {0}")]
    InvalidCost(f64),

    #[error("mu must be finite and non-negative, got {0}")]
    InvalidMu(f64),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    #[error("infeasible recipe: {0}")]
    InfeasibleRecipe(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model file checksum mismatch (file truncated or corrupted)")]
    Checksum,

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
