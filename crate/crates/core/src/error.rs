//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ItlError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{name}`: {detail}")]
    InvalidArgument { name: &'static str, detail: String },

    #[error("unknown task id {task} ({detail})")]
    UnknownTask { task: usize, detail: String },

    #[error("task order violation: expected task {expected}, got {got}")]
    TaskOrder { expected: usize, got: usize },

    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },

    #[error("data format error in {path}: {detail}")]
    DataFormat { path: String, detail: String },

    #[error("config error in field `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ItlError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        ItlError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        ItlError::InvalidArgument {
            name,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ItlError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, ItlError>;
