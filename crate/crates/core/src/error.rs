use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },

    #[error("{path}, line {line}: {message}")]
    MalformedRow { path: PathBuf, line: u64, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("client {client}: {source}")]
    Client {
        client: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("floor {floor}: {source}")]
    Floor {
        floor: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error (or the error it wraps) is a divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Error::Divergence(_) => true,
            Error::Client { source, .. } | Error::Floor { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
