use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the simulator, learner and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad dimensions, bad values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was used in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),

    /// Numerical fault during simulation or optimization.
    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("aggregation error: {0}")]
    Aggregation(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by user-supplied configuration or files.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
