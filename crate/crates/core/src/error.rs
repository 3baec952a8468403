use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid value for {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("expected {expected} action space, got {got}")]
    Space {
        expected: &'static str,
        got: &'static str,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("no conditioning cache available; a full-path round must run first")]
    MissingCache,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("environment fault at tick {tick}: {message}")]
    Env { tick: u64, message: String },

    #[error("episode failed after {rounds} rounds: {source}")]
    Episode {
        rounds: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    /// Whether the error comes from user input (config, flags) rather than a
    /// failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
