use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, configuration values, or data content failed.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A text file (manifest, config, history) could not be parsed.
    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    /// A correlation was requested on a series without variance.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Shorthand for building a [`Error::Validation`].
macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Validation(format!($($arg)*))
    };
}
pub(crate) use invalid;

pub type Result<T, E = Error> = std::result::Result<T, E>;
