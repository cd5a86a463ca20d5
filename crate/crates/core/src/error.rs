use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("gradient layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("objective became non-finite at iteration {iter}")]
    NonFinite { iter: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
