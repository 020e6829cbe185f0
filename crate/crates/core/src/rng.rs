//! Seeded random streams.
//!
//! Every stochastic routine in the crate takes an explicit `&mut ChaCha8Rng`.
//! Independent streams for sub-tasks (one per block, one per phase) are
//! derived from a single run seed with [`derive_seed`] so that adding a phase
//! never perturbs the draws of another.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `(seed, stream)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    seeded(derive_seed(seed, stream))
}
