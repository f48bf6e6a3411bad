use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("finite difference: function value is not finite ({value})")]
    NonFiniteFunction { value: f64 },
}

impl DiffError {
    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        DiffError::ShapeMismatch {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        DiffError::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DiffError>;
