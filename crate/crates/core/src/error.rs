use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid rating scale {0}: must be positive")]
    InvalidScale(f64),

    #[error("missing column `{0}` in header")]
    MissingColumn(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rating {index} has no experience assignment")]
    MissingAssignment { index: usize },

    #[error("non-finite cost at level {level}, position {position}")]
    NonFiniteCost { level: usize, position: usize },

    #[error("monotonicity violated at user={user}, index={index}")]
    Monotonicity { user: String, index: usize },

    #[error("objective diverged: non-finite value in {block}")]
    Divergence { block: String },

    #[error("training failed for every lambda: {0}")]
    TrainingFailed(String),

    #[error("model and data mismatch: {0}")]
    Mismatch(String),

    #[error("{0}")]
    Analysis(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by training rather than by the input data.
    pub fn is_training_failure(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::TrainingFailed(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
