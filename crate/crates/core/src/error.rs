use std::path::PathBuf;

use ncsl_diffcore::DiffError;
use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("invalid config at `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: corrupt at byte {offset}: {detail}")]
    Corrupt { path: PathBuf, offset: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("zero-norm row {row} in {what}")]
    ZeroNorm { what: String, row: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("rank-deficient design matrix ({0}); fit a single-feature model instead")]
    RankDeficient(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl CoreError {
    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }
}
