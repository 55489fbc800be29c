//! Dense row-major tensors and a tape for reverse-mode automatic differentiation.
//!
//! Every forward operation is recorded on a [`Tape`] as a node holding its
//! value. [`Tape::backward`] replays the recorded operations in reverse and
//! returns gradients for every leaf that was registered with
//! `requires_grad = true`.
//!
//! All reductions run in a fixed sequential order, so identical inputs give
//! bit-identical outputs and gradients. Training uses `f32`; the finite
//! difference probes in [`gradcheck`] use `f64`.

mod error;
pub mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::TensorError;
pub use gradcheck::{grad_check, GradCheckReport, ParamGradError};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
