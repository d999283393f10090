use std::path::PathBuf;

use crate::solvers::SolverTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative solver produced non-finite or runaway iterates.
    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        trace: Option<Box<SolverTrace>>,
    },

    /// Training loss became non-finite; carries the per-epoch history so far.
    #[error("training failure: {message}")]
    Training { message: String, history: Vec<f64> },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }
}
