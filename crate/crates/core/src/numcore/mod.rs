//! Deterministic `f64` numeric substrate: tensors, a reverse-mode graph over
//! the layer set the model uses, Adam, finite-difference gradient checking
//! and the checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

#[cfg(test)]
mod layer_tests;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub(crate) use graph::dot;
pub use graph::{softmax_rows, Graph, Mask, NodeId};
pub use layers::{FeedForward, LayerNorm, MultiHeadAttention};
pub use optim::Adam;
pub use params::{uniform, xavier, Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;
