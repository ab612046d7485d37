use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing gradient for parameters: {}", .0.join(", "))]
    MissingGrad(Vec<String>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("zero-norm embedding in {0}; cosine similarity undefined")]
    ZeroNorm(&'static str),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("missing required config key `{0}`")]
    MissingKey(String),

    #[error("task {task}, step `{step}`: {source}")]
    Task {
        task: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {err}", path.display())]
    Io {
        path: PathBuf,
        err: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            err: source,
        }
    }

    /// Wraps an error with the orchestrator's task index and step label.
    pub fn in_task(self, task: usize, step: &'static str) -> Self {
        Error::Task {
            task,
            step,
            source: Box::new(self),
        }
    }
}
