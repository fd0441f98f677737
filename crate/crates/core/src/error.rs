use std::path::PathBuf;

use crate::oracle::Slot;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown condition slot `{0}`")]
    Condition(String),

    #[error("oracle error on slot {slot}: {message}")]
    Oracle { slot: Slot, message: String },

    #[error("non-finite gradient at step {step}: {dump}")]
    NonFinite { step: usize, dump: String },

    #[error("run failed at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Error with step context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }

    /// True when the failure originated in a score oracle (transport,
    /// protocol or an error response).
    pub fn is_oracle(&self) -> bool {
        matches!(self.root(), Error::Oracle { .. })
    }
}
