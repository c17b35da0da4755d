//! Keyed random streams.
//!
//! A run owns one seed; every consumer derives an independent ChaCha
//! stream from `(seed, site, counter)`, so dropout masks and shuffles are
//! reproducible regardless of the order in which streams are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a list of words into a single 64-bit key.
pub fn derive_key(words: &[u64]) -> u64 {
    words.iter().fold(0x243f_6a88_85a3_08d3, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Independent generator for `(seed, site, counter)`.
pub fn keyed_rng(seed: u64, site: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(&[seed, site, counter]))
}
