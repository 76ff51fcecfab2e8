use thiserror::Error;

/// Errors raised by the evidence library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A propagated state became NaN or infinite.
    #[error("numerical overflow at integration step {step}: {context}")]
    NumericalOverflow { step: usize, context: String },

    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
}

impl CmeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        CmeError::InvalidInput(msg.into())
    }

    pub(crate) fn ill(msg: impl Into<String>) -> Self {
        CmeError::IllConditioned(msg.into())
    }

    /// True for failures caused by the numerics rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        !matches!(self, CmeError::InvalidInput(_))
    }
}

pub type Result<T, E = CmeError> = std::result::Result<T, E>;
