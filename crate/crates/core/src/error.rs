use thiserror::Error;

use crate::collectives::GroupError;

/// Errors surfaced by the numerical layers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("division by zero at coordinate {coordinate}")]
    DivisionByZero { coordinate: usize },

    #[error("empty collection: {context}")]
    EmptyCollection { context: &'static str },

    #[error("zero second-moment coordinate {coordinate} in theory-form update")]
    ZeroSecondMoment { coordinate: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Collective(#[from] GroupError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }
}
