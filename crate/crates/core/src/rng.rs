//! Keyed random streams.
//!
//! Every stochastic task derives its generator from the master seed and a
//! short key path (stage tag, repetition, row), so results never depend on
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stage tags used as the first key component.
pub mod tag {
    pub const SCORE_TRAIN: u64 = 0x5c0e;
    pub const SAMPLER: u64 = 0x5a3f;
    pub const CMI: u64 = 0xc31;
    pub const DATA: u64 = 0xda7a;
    pub const TRIAL: u64 = 0x7e1a;
    pub const QUANTILE: u64 = 0x9a47;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, keys))
}
