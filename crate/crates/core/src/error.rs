use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the tensor, decomposition and detection layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("malformed {format} data at byte {offset}: {reason}")]
    Malformed {
        format: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("filter {filter}: {source}")]
    Filter {
        filter: String,
        #[source]
        source: Box<Error>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

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

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a filter identity ("root", "part 3", ...) to an error.
    pub fn in_filter(self, filter: impl Into<String>) -> Self {
        Error::Filter {
            filter: filter.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
