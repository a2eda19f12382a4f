use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("spatial index is stale: positions changed since it was built")]
    StaleIndex,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("certificate violation: p = 0 but q = {q} > 0")]
    CertificateViolation { q: f64 },

    #[error("training protocol error: {0}")]
    TrainingProtocol(String),

    #[error("training diverged at step {step}: {diagnostic}")]
    Divergence { step: usize, diagnostic: String },

    #[error("non-finite state for agent {agent} at step {step}")]
    NonFiniteState { agent: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }
}
