use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the engine, the network, training, or file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-deterministic function: two forward passes disagree ({first} vs {second})")]
    Determinism { first: f64, second: f64 },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("numerical failure at step {step}: loss {loss}, lr {lr:e}, max |grad| {max_grad:e}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        max_grad: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 1 usage, 2 data or format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) | Error::Format { .. } | Error::Io { .. } | Error::Dimension { .. } => 2,
            Error::NonFinite { .. }
            | Error::Determinism { .. }
            | Error::Diverged { .. }
            | Error::Training(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
