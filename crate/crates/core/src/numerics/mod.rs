//! Deterministic tensor algebra with reverse-mode differentiation.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{finite_diff_check, max_relative_error, numeric_gradient, relative_error};
pub use graph::{BinaryKind, Graph, UnaryKind, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
