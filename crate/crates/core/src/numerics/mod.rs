//! Dense tensors, reverse-mode differentiation and the finite-difference oracle.

mod gradcheck;
pub mod graph;
pub mod kernels;
mod scalar;
mod tensor;

pub use gradcheck::{central_difference, grad_check, relative_error, GradCheck};
pub use graph::{CustomOp, Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
