//! Batch-related convolutional cells (BConv-Cells), progressive transfer
//! learning networks built from them, and the small define-by-run autodiff
//! engine they run on.

pub mod cells;
pub mod data;
pub mod error;
pub mod network;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Float, Graph, NodeId, Tensor};
