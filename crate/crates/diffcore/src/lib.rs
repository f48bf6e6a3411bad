//! Dense row-major tensors, a reverse-mode tape over a closed set of
//! primitives, and a finite-difference oracle for checking them.
//!
//! Models are written against [`Tape`]; training runs in `f32` and gradient
//! checks in `f64` through the same generic code.

pub mod error;
pub mod gradcheck;
mod ops;
pub mod param;
pub mod scalar;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{
    compare_gradients, finite_difference_gradient, gradient_check, GradCheckReport, Tolerance,
    COMPOSITE_TOL, FD_EPS, PRIMITIVE_TOL,
};
pub use ops::{bilinear_point, trilinear_point, GridIndex};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
