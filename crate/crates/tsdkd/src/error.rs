use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed data passed to an operation (wrong length, empty, non-finite, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter outside its documented range (beta, tau, k, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A computation produced or encountered a non-finite value it cannot propagate.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An I/O failure, annotated with the file it concerns.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A checkpoint file that does not follow the expected binary layout.
    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    /// A configuration file or override that fails validation.
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
