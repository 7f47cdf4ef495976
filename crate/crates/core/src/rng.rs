//! Seed derivation for reproducible, thread-count independent sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent sub-seed from `(seed, index)` with the SplitMix64
/// finalizer. Used for per-user, per-realization and per-sample streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(seed: u64, index: u64) -> ChaCha8Rng {
    rng_from(derive_seed(seed, index))
}
