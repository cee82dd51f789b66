use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("max-pool over an empty neighborhood")]
    EmptyNeighborhood,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite value produced by {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(&'static str),

    #[error("embedding cache is stale: {0}")]
    CacheInvalid(String),

    #[error("unsupported {kind} file version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_))
    }
}
