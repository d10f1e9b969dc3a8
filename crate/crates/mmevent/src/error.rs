use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown event type: {0}")]
    UnknownEventType(String),

    #[error("load error in document {doc_id} at {field}: {msg}")]
    Load {
        doc_id: String,
        field: String,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numeric failure at epoch {epoch}, step {step}: {msg}")]
    Numeric {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
