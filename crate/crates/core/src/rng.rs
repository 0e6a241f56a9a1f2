//! Seeded random streams.
//!
//! Every seeded procedure uses ChaCha8 keyed by a `u64` seed. Independent
//! sub-computations (one sampler draw, one bootstrap resample, one synthetic
//! image) take their own ChaCha stream number from the same seed, so results
//! do not depend on how many values earlier work consumed or on the order in
//! which parallel work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StudyRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StudyRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for sub-computation `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> StudyRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used where a whole procedure (not one stream) is
/// delegated, e.g. one batch's slot permutation.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
