use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric or structural parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value outside the mathematical domain of an operation (log of a
    /// non-positive number, singular division, non-PSD covariance, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller-supplied data is unusable (empty text, empty candidate list, ...).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset ingestion failed for one or more records.
    #[error("ingest error: {0}")]
    Ingest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("audio error in {path}: {message}")]
    Audio { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs or configuration rather
    /// than by a failure inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Checkpoint(_))
    }
}
