use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the pipeline can report.
///
/// The CLI maps all of these to the "data/contract error" exit status; usage
/// errors never reach this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("category {category} has {count} items, at least 7 are needed for price levels")]
    DegenerateCategory { category: String, count: usize },

    #[error("{path}:{line}: {message}")]
    Data {
        path: String,
        line: u64,
        message: String,
    },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("brand {0:?} is not in the vocabulary")]
    Vocabulary(String),

    #[error("dataset is empty after {0}")]
    EmptyDataset(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint version {found} is incompatible with supported version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    CheckpointIntegrity(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
