//! Counter-style random streams.
//!
//! Every random draw in training, evaluation and generation comes from a
//! stream keyed by `(seed, purpose, index)`, so nothing depends on how many
//! values an earlier stage consumed and checkpoints need no RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const EVAL_NOISE: u64 = 4;
    pub const PRIOR_NOISE: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const DEQUANTIZE: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const EVAL_DEQUANTIZE: u64 = 9;
}

pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
