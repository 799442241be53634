//! Desk-scale simulator of federated large-small model co-training.
//!
//! Simulated clients train small models on private non-IID shards. The server
//! fine-tunes the adapter of a large frozen-backbone model by distilling from
//! those small models over an unlabeled proxy set (reverse direction), then
//! distills the updated large model back into the small models (forward
//! direction). A FedAvg-on-adapters baseline runs on the same data.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distillation;
pub mod error;
pub mod federation;
pub mod models;
pub mod runner;
pub mod scalar;
pub mod seeds;

pub use autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
pub use error::{KoalaError, Result};
pub use models::{BridgingMatrix, Model, ModelSpec};
pub use scalar::Scalar;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
pub type Dataset64 = data::LabeledDataset<f64>;
pub type Dataset32 = data::LabeledDataset<f32>;
