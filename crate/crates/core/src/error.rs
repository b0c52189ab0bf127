use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("internal consistency violated: {0}")]
    Internal(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    Diverged { step: u64, dump: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn rejected(msg: impl Into<String>) -> Self {
        Error::RejectedInput(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}
