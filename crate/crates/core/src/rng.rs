//! Seed derivation. Every random stream comes from a (seed, stream, index)
//! triple so parallel or reordered work draws identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

// Stream identifiers.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN_SCENES: u64 = 2;
pub const STREAM_VAL_SCENES: u64 = 3;
pub const STREAM_STEPS: u64 = 4;
pub const STREAM_AUGMENT: u64 = 5;
pub const STREAM_GRADCHECK: u64 = 6;
pub const STREAM_TESTS: u64 = 99;
