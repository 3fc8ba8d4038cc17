use thiserror::Error;

/// Errors produced by the attention, ranking and training primitives.
#[derive(Debug, Error)]
pub enum IapError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A value left the representable range (e.g. `exp` overflow).
    #[error("range error: {0}")]
    Range(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric degeneracy: {0}")]
    Degenerate(String),
    #[error("no convergence: {0}")]
    Convergence(String),
    /// Refused because the request would exceed a configured resource cap.
    #[error("resource guard: {0}")]
    ResourceGuard(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = IapError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(IapError::InvalidArgument(msg.into()))
}
