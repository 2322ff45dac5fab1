use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },

    #[error("scale error: {0}")]
    Scale(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("constraint infeasible: threshold {threshold} is below the minimal achievable {min_achievable}")]
    Infeasible { threshold: f64, min_achievable: f64 },

    #[error("search error: {0}")]
    Search(String),

    #[error("failed to load {path}: {message}")]
    Load { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Load { path: path.into(), message: message.into() }
    }
}
