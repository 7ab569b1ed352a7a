//! Deterministic seeding.
//!
//! Every random stream in the crate is a `ChaCha8Rng` seeded from a master
//! seed plus a stream index, so work split across threads draws the same
//! numbers as a serial run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the `stream`-th child of `master`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    mix(mix(master) ^ mix(stream.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, stream: u64) -> Rng {
    rng_from_seed(derive_seed(master, stream))
}

/// Named streams used across the pipeline, so unrelated consumers of one
/// master seed never share random numbers.
pub mod stream {
    pub const PRIOR: u64 = 1;
    pub const SIMULATION: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLER: u64 = 5;
    pub const CLASSIFIER: u64 = 6;
    pub const OBSERVATION: u64 = 7;
    pub const REFERENCE: u64 = 8;
    pub const BASELINE: u64 = 9;
    pub const CLASSIFIER_DATA: u64 = 10;
    pub const TRAINING_DATA: u64 = 11;
    pub const RETRAIN_SAMPLER: u64 = 12;
    pub const SUBSET: u64 = 1 << 32;
}
