//! Deterministic RNG derivation for reproducible pipelines.
//!
//! Every randomized step derives its stream from a user seed plus a fixed
//! salt, so reruns with the same arguments are bit-identical and independent
//! work units (images, folds, subsets) never share a stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Create a deterministic RNG from a 64-bit seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a seed with an integer salt (splitmix64 finalizer).
pub fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a seed with a string id (FNV-1a, then splitmix64).
///
/// Used to give each image in a batch its own stream from the global seed;
/// stable across runs and platforms, unlike the std hasher.
pub fn mix_str(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed, h)
}
