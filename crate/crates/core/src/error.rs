use thiserror::Error;

/// Errors raised by the fusion library.
#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite values in {block} at iteration {iteration}")]
    NonFinite { iteration: usize, block: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FusionError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FusionError::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        FusionError::Parameter(msg.into())
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, FusionError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;
