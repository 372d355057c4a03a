//! Seeding for independent, order-free random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by
//! a mixed `(base_seed, purpose)` pair, with the replicate index selecting
//! the stream. A replicate's draws therefore never depend on which other
//! replicates ran, in what order or on how many threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes; distinct values keep the draws for images, covariates,
/// noise and bootstrap weights independent under a shared base seed.
pub mod purpose {
    pub const SCORES: u64 = 1;
    pub const COVARIATES: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const WEIGHTS: u64 = 4;
    pub const TREATMENT: u64 = 5;
}

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(base_seed, purpose)` positioned on stream `stream`.
pub fn stream_rng(base_seed: u64, purpose: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(base_seed ^ mix64(purpose)));
    rng.set_stream(stream);
    rng
}
