//! Deterministic seed derivation for independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of stream labels.
///
/// Streams with different paths are statistically independent, and the
/// result does not depend on the order in which streams are created, so
/// work can run in parallel without perturbing any trajectory.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix(base), |acc, &label| mix(acc ^ mix(label)))
}

pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}

// Stream labels, kept distinct so no two subsystems share a stream.
pub(crate) const KMEANS: u64 = 1;
pub(crate) const MODEL_INIT: u64 = 2;
pub(crate) const LOCAL_TRAIN: u64 = 3;
pub(crate) const DATA: u64 = 4;
pub(crate) const PARTITION: u64 = 5;
