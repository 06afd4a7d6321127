//! Bottom-up hierarchical VAE for out-of-distribution detection with
//! likelihood-ratio scores over the latent hierarchy.

pub mod analysis;
pub mod data;
pub mod dist;
pub mod error;
pub mod hvae;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
