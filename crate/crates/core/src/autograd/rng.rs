//! Counter-based random streams.
//!
//! A stream is identified by a base seed plus a key path (for example
//! `[purpose, epoch, sequence, interval]`), so the draws a computation sees do
//! not depend on how work is batched or scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub mod purpose {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const MC_TRAIN: u64 = 3;
    pub const MC_EVAL: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const SIMULATE: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, key: &[u64]) -> u64 {
    key.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(base: u64, key: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, key))
}

/// FNV-1a, used to turn tensor names into stable stream keys.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
