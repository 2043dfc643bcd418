//! Minimal tensors, reverse-mode autodiff and training utilities.

pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, softmax2, BufferUpdate, Graph, Mode, Var};
pub use params::{Gradients, ParamId, ParameterStore, Sgd};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
