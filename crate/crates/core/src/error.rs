use std::path::PathBuf;

use crate::trajectory::Trajectory;

/// Errors produced anywhere in the landscape toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("model returned an empty generation")]
    EmptyGeneration,
    #[error("capability error: {0}")]
    Capability(String),
    #[error("score cache integrity error for key {key}: {message}")]
    Integrity { key: String, message: String },
    #[error("reference error: unknown question id `{0}`")]
    Reference(String),
    #[error("sampling exhausted for question `{question_id}` slot {slot}: {partial_count} trajectories completed")]
    SamplingExhausted {
        question_id: String,
        slot: usize,
        partial_count: usize,
        partial: Box<Vec<Trajectory>>,
    },
    #[error("training error: {0}")]
    Training(String),
    #[error("scoring failed at state {state}, choice {choice:?}: {source}")]
    Scoring {
        state: usize,
        choice: Option<usize>,
        #[source]
        source: Box<Error>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Innermost error, unwrapping scoring coordinates.
    pub fn root(&self) -> &Error {
        match self {
            Error::Scoring { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
