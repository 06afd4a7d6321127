//! Named, reproducible random substreams.
//!
//! Every stochastic step derives its generator from the root seed, a stream
//! name and an index, so that results never depend on call order, batching or
//! sharding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream names used across the pipeline.
pub mod streams {
    pub const INIT: &str = "init";
    pub const TRAIN: &str = "train";
    pub const BINARIZE_TRAIN: &str = "binarize-train";
    pub const BINARIZE_EVAL: &str = "binarize-eval";
    pub const SCORE: &str = "score";
    pub const BALANCE: &str = "balance";
    pub const ANALYSIS: &str = "analysis";
}

pub fn substream(seed: u64, name: &str, index: u64) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    Rng::from_seed(digest)
}
