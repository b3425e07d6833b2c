//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("misaligned injection span: {0}")]
    Alignment(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("template error: missing field `{field}` for template `{template}`")]
    Template { template: String, field: String },

    #[error("no parsable score in judge reply: {raw:?}")]
    Extraction { raw: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("frozen parameter group modified: {0:?}")]
    FrozenViolation(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 usage, 3 data, 4 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::FrozenViolation(_) => 4,
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
