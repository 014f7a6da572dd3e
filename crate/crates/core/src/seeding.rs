//! Derivation of independent, reproducible RNG streams from a global seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stream identified by `tags` under `seed`.
///
/// Streams with different tags are statistically independent, and the same
/// `(seed, tags)` always yields the same sequence regardless of which thread
/// or in which order it is requested.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &t in tags {
        h = splitmix(h ^ splitmix(t));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// A plain `u64` seed for a component, e.g. to hand to an API that takes one.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    stream(seed, tags).next_u64()
}
