//! Minimal dense-tensor reverse-mode autodiff: exactly the layer set the
//! detection network needs, nothing more. Graphs are built per forward
//! pass; parameters live outside the graph and enter as leaves.

mod graph;
mod tensor;

pub mod fd;

pub use graph::{BnStats, Graph, TensorId};
pub use tensor::{read_checkpoint, write_checkpoint, Tensor};
