//! Seed splitting.
//!
//! All randomness flows from explicit `u64` seeds. A child seed is derived from
//! a parent and an index with a SplitMix64 finalizer, so the stream a consumer
//! sees depends only on its position in the split tree and never on thread
//! scheduling. Monte Carlo run `i`, filter `f` uses
//! `split(split(seed, i), name_key(f))`; truth simulation for run `i` uses
//! `split(split(seed, i), TRUTH_STREAM)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type FilterRng = ChaCha8Rng;

/// Reserved stream index for truth/measurement simulation.
pub const TRUTH_STREAM: u64 = 0x7472_7574_6800_0000;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the child seed at `index` under `parent`.
pub fn split(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

/// Stable 64-bit key for a filter name (FNV-1a).
pub fn name_key(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_from_seed(seed: u64) -> FilterRng {
    FilterRng::seed_from_u64(seed)
}

/// Generator for ensemble member `member` within one recursive step keyed by `step_key`.
pub fn member_rng(step_key: u64, member: usize) -> FilterRng {
    rng_from_seed(split(step_key, member as u64))
}
