//! Seeded random streams. Every stochastic step in the crate draws from a
//! SplitMix64 generator so results depend only on the seed.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task of a seeded run.
pub fn derive(seed: u64, stream: u64) -> SplitMix64 {
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}
