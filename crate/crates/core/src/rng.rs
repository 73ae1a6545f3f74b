//! Seed derivation and the crate-wide RNG.
//!
//! All randomness flows from a single `u64` master seed. Independent
//! streams (model init, warmup, dataset split, per-epoch shuffles,
//! per-sample rendering) are derived with a splitmix64 mix of the master
//! seed and a stream label, so adding draws to one stream never perturbs
//! another. Streams are ChaCha8 so sequences are identical across
//! platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixing of a 64-bit state.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed, a stream label, and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

/// A deterministic RNG stream for `(master, label, index)`.
pub fn stream(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}
