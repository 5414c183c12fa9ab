//! Minimal tensor + reverse-mode autodiff engine with second-order support,
//! MLP building blocks and SGD/Adam optimizers.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::Optimizer;
pub use tensor::Tensor;
