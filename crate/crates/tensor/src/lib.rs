//! Small reverse-mode automatic differentiation core over `f64` tensors.
//!
//! Every op records a vector-Jacobian product when any input carries a
//! gradient; [`Tensor::backward`] replays them in reverse topological order.
//! All kernels run single-threaded with a fixed reduction order, so identical
//! inputs give bitwise-identical outputs.

pub mod error;
mod gemm;
pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{fd_step, grad_check, GradReport};
pub use ops::elementwise::{elementwise, Elementwise};
pub use tensor::{grad_enabled, no_grad, Tensor};
