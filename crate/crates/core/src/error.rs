use thiserror::Error;

/// Errors produced by the library.
///
/// Variants are grouped so the CLI can map them onto its exit-code contract:
/// shape/config/format problems are data errors, numeric and training
/// problems are numeric errors.
#[derive(Debug, Error)]
pub enum LynxError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pattern violation at row {row}, group {group}: {count} nonzeros exceed n={n}")]
    PatternViolation {
        row: usize,
        group: usize,
        count: usize,
        n: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("undefined reference: {0}")]
    UndefinedReference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LynxError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        LynxError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LynxError::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        LynxError::Format(msg.into())
    }

    /// True for errors caused by arithmetic rather than malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, LynxError::Numeric(_) | LynxError::Training { .. })
    }
}

pub type Result<T> = std::result::Result<T, LynxError>;
