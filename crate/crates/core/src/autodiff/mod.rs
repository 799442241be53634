//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
pub mod functional;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use functional::{cross_entropy_loss, kl_loss, log_softmax_t, mse_loss, softmax_t};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
