//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdsegError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}{}", context_suffix(.context))]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
        context: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in term `{term}` ({value}){}", context_suffix(.details))]
    NonFinite {
        term: String,
        value: f64,
        details: String,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("run directory `{0}` is locked by another process (lock file present)")]
    RunDirLocked(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl SdsegError {
    pub fn shape(expected: Vec<usize>, actual: Vec<usize>, context: impl Into<String>) -> Self {
        SdsegError::ShapeMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SdsegError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, SdsegError>;
