use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed bundle or checkpoint contents. `offset` is a byte offset for
    /// binary files and a record index for JSON tables.
    #[error("{file} at offset {offset}: {message}")]
    Format { file: String, offset: u64, message: String },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),

    #[error("empty class {0}")]
    EmptyClass(u32),

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("sinkhorn numerical failure")]
    SinkhornFailure,

    #[error("degenerate covariance for class {0}")]
    DegenerateCovariance(u32),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("undefined for single session")]
    SingleSession,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

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

    pub(crate) fn format(file: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SinkhornFailure | Error::DegenerateCovariance(_) | Error::NonFiniteLoss(_)
        )
    }

    /// True when an artifact (checkpoint, bundle) does not fit its counterpart.
    pub fn is_artifact_mismatch(&self) -> bool {
        matches!(self, Error::DimensionMismatch { .. } | Error::CorruptCheckpoint(_))
    }
}
