//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MatError {
    /// A shape disagreement between two arrays or between data and a model.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    /// Invalid configuration: bad hyper-parameter, unknown name, inconsistent setup.
    #[error("configuration error: {0}")]
    Config(String),

    /// A class label outside `[0, classes)`.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Non-finite values encountered during numeric work.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Data on disk failed an integrity check.
    #[error("corrupt data: {0}")]
    CorruptData(String),

    /// A persisted container has an unsupported format version.
    #[error("format version mismatch: found {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },

    /// Reports with incompatible schemas were combined.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MatError {
    /// Process exit code for the CLI: 2 for configuration problems, 3 for
    /// runtime/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MatError::Config(_)
            | MatError::LabelOutOfRange { .. }
            | MatError::ShapeMismatch { .. }
            | MatError::FormatVersion { .. }
            | MatError::Aggregation(_) => 2,
            MatError::Numeric(_)
            | MatError::CorruptData(_)
            | MatError::Io(_)
            | MatError::Json(_) => 3,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        MatError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MatError>;
