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

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("line {line}: unknown behavior label {label:?}")]
    Schema { line: u64, label: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in tensor {tensor}")]
    NonFinite { tensor: String },

    #[error("instance too large for the naive oracle ({users} x {items} > {limit})")]
    TooLarge { users: usize, items: usize, limit: usize },

    #[error("metrics are undefined for an empty user set")]
    UndefinedMetrics,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("finite-difference check failed at {count} coordinates, worst {worst:.3e} at {tensor}[{index}]")]
    GradientCheck { count: usize, worst: f64, tensor: String, index: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
