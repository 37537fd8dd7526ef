use std::path::PathBuf;

use crate::attention::IterateRecord;

pub type Result<T, E = DdError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum DdError {
    /// An input violated a documented precondition. `field` names the offending
    /// parameter so callers (the HTTP layer in particular) can report it.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("backend does not support {0}")]
    Capability(String),

    #[error("backend contract violation: {0}")]
    Contract(String),

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    #[error("non-finite {what} at iteration {iteration} of step {step}")]
    NonFinite {
        what: &'static str,
        step: usize,
        iteration: usize,
        history: Vec<IterateRecord>,
    },

    #[error("object mask is empty: {0}")]
    DegenerateMask(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("run {0} not found")]
    NotFound(String),

    #[error("run {0} already exists in the store")]
    Duplicate(String),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl DdError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        DdError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefixes the field path of a validation error, e.g. `box.left` becomes
    /// `directives[1].box.left`.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            DdError::Validation { field, message } => DdError::Validation {
                field: format!("{prefix}.{field}"),
                message,
            },
            other => other,
        }
    }
}
