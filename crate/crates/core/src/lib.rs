//! Deterministic simulator and library for training one-step-ahead
//! short-term load forecasters under federated learning, with optional
//! personalization layers and communication-cost accounting.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{LayerPartition, ModelConfig, ParamSet, PartitionId};
pub use optim::{AdamState, HyperParams, ServerAlgo, ServerState};
pub use tensor::{Gradients, NodeId, Tape, Tensor};
