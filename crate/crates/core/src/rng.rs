//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a counter-based ChaCha stream
//! keyed by a master seed plus a purpose tag, so independently consumed
//! streams (initialization, shuffling, data generation) stay reproducible
//! across platforms and cannot interfere with each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a master seed and a purpose tag.
///
/// FNV-1a over the tag bytes, mixed with the master seed through a
/// splitmix64 finalizer.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// A reproducible stream for `(master, tag)`.
pub fn stream(master: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag))
}
