//! Dense tensors and the reverse-mode differentiation tape.

mod float;
mod graph;
mod kernels;
#[allow(clippy::module_inception)]
mod tensor;

pub use float::{DType, Float};
pub use graph::{sigmoid, Gradients, Graph, NodeId, OpKind, Pointwise};
pub use tensor::{Tensor, MAX_RANK};
