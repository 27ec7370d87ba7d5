//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("dimensional error for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: String,
        got: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty task: {0}")]
    EmptyTask(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite {what} in tensor '{tensor}'")]
    NonFinite { what: String, tensor: String },

    #[error("training aborted at epoch {epoch}, step {step}: {msg}")]
    TrainAborted {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("gradient check failure: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-parsable category tag, used by the CLI's single-line
    /// error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::EmptyTask(_) => "empty-task",
            Error::Range(_) => "range",
            Error::Decode(_) => "decode",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non-finite",
            Error::TrainAborted { .. } => "train-aborted",
            Error::GradCheck(_) => "grad-check",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
