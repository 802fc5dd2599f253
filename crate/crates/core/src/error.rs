use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// `Domain` covers violated preconditions on values (non-finite inputs,
/// shape mismatches, off-simplex probabilities). `Config` covers invalid run
/// configuration and is reported separately by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("gradient check failed: {0}")]
    Check(String),
    #[error("evaluation failed on case {case}: {source}")]
    Evaluation {
        case: String,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by configuration rather than data values.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
