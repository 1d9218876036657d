//! Seed derivation. Every stochastic draw in the crate comes from a
//! ChaCha stream whose seed is a pure function of a base seed and a list of
//! tags (step index, image index, purpose), so execution order never changes
//! the draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Purpose tags, kept distinct so streams for different uses never collide.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SHIFT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const CROP: u64 = 5;
    pub const SYNTH: u64 = 6;
}
