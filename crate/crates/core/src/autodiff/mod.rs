//! Dense tensors with tape-based reverse-mode differentiation.

mod graph;
pub mod kernels;
mod real;
mod tensor;

pub use graph::{Graph, Var};
pub use real::{cst, MatRef, Real};
pub use tensor::Tensor;
