use std::path::PathBuf;

use thiserror::Error;

use crate::data::idx::IdxError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },

    #[error("parameter layout mismatch: expected {expected} values, got {actual}")]
    Layout { expected: usize, actual: usize },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("aggregation failed: {0}")]
    Aggregation(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, grouped by failure category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Idx(_) => 3,
            Error::Round { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
