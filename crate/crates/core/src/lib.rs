//! Gaussian-Bernoulli RBM stacks pre-trained layer by layer, unfolded into a
//! deep autoencoder and fine-tuned to predict UAV-ground received signal
//! strength from flight and cell-site features.

pub mod autoencoder;
pub mod bundle;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradient;
pub mod math;
pub mod pipeline;
pub mod pretrain;
pub mod rbm;
pub mod rng;

pub use error::{Error, Result};
