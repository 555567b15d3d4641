//! Two-stage latent-space forecasting: a point-wise expanding autoencoder
//! builds a latent state space, and a forecasting backbone is trained to
//! predict future latent states that the frozen decoder maps back to
//! observations.

pub mod autoencoder;
pub mod backbones;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
