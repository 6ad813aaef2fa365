//! Joint variational inference of a data representation and a latent
//! feature-relation graph, with a self-attention graph decoder.
//!
//! Module map:
//! - [`tensor`], [`autodiff`]: dense arrays and the reverse-mode tape
//! - [`stochastic`]: Gaussian and relaxed-categorical samplers with KL terms
//! - [`encoders`], [`decoder`], [`model`]: the network
//! - [`training`]: objective and optimizer loop
//! - [`data`]: generators, loaders and perturbations
//! - [`eval`]: metrics, baselines and exports
//! - [`cli`]: the `sagvae` command line

pub mod autodiff;
#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod stochastic;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{GraphMode, ModelConfig, SagVae};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;
pub use training::{train, ReconLoss, TrainConfig, TrainReport, Trainer};
