//! Bottom-up hierarchical VAE: architecture, likelihood bounds and training.

pub mod bounds;
pub mod config;
pub mod model;
pub mod noise;
pub mod train;

pub use bounds::{
    bound_gt_k, bound_lt_l, elbo, evaluate, kl_decomposition, kl_decomposition_with, latent_pass, log_mean_exp,
    reconstruct, BoundId, BoundKind, BoundResult, KlDecomposition, LatentPass, LayerRecord, Plan, Proposal,
};
pub use config::HvaeConfig;
pub use model::HvaeModel;
pub use noise::LatentNoise;
pub use train::{bits_per_dim, fit, init_batch, train, EpochRecord, TrainLog};
