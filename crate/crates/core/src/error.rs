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

    #[error("{path}: {message} at line {line}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// Input data violates a contract (bad shapes, unknown ids, leakage, ...).
    #[error("{0}")]
    Data(String),

    /// Invalid configuration or arguments.
    #[error("{0}")]
    Config(String),

    /// Non-finite values or degenerate geometry during training or inference.
    #[error("{0}")]
    Numerical(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 usage, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numerical(_) => 4,
            Error::Io { .. } | Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) => 3,
        }
    }
}
