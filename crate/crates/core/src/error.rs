use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GilError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GilError {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error("row {row}, column {column:?}: cannot parse {value:?} as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Divergence { iteration: usize, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("replay buffer is empty")]
    EmptyReplay,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GilError {
    pub fn config(msg: impl Into<String>) -> Self {
        GilError::Config(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        GilError::Load { path: path.into(), message: msg.into() }
    }
}
