use std::path::PathBuf;

use thiserror::Error;

use crate::pack::PackError;
use crate::types::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Validation(#[from] ValidationReport),

    #[error("computation error: {0}")]
    Computation(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Pack(#[from] PackError),

    #[error("episode {index} failed: {source}")]
    Episode {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error: 2 validation, 3 I/O, 4 configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Pack(PackError::Io { .. }) => 3,
            Error::Pack(_) => 2,
            Error::Io { .. } => 3,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Generation(_) => 4,
            Error::Episode { source, .. } => source.exit_code(),
            Error::Computation(_) => 1,
        }
    }
}
