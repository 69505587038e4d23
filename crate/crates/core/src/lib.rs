//! Controlled CNN tagger for aspect-term extraction.
//!
//! A double-embedding CNN tagger whose embedding and convolution layers are
//! wrapped by small residual control modules. The control modules start as
//! the identity, so an untrained controlled model computes exactly what the
//! plain CNN computes. Training alternates between tuning the convolutions
//! and tuning the control modules plus the output layer.
//!
//! Every layer has a hand-written forward and backward pass over `f64`
//! tensors; [`gradcheck`] verifies them against central differences.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use parallel::Execution;
pub use tensor::{Mode, Tensor};
pub use trainer::{TrainConfig, TrainMode};
