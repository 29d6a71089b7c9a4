//! Explicitly seeded random streams.
//!
//! Every random draw in the crate goes through a [`ChaCha8Rng`] built from
//! a 64-bit seed. Derived streams (per trial, per training scene) are keyed
//! by index with [`split_seed`], so the values a work item sees never depend
//! on which thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for work item `index` under `master`: `master ^ mix64(index)`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    master ^ mix64(index)
}

/// Two-level split, used where work items are addressed by (stage, item).
pub fn split_seed2(master: u64, stage: u64, index: u64) -> u64 {
    split_seed(split_seed(master, stage).rotate_left(17), index)
}
