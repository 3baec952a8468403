//! Deterministic, named RNG streams.
//!
//! Each consumer of randomness (episode setup, per-round denoising noise,
//! verifier noise, training shuffles) gets its own ChaCha stream derived from
//! a base seed plus a path of identifiers. Streams never share state, so
//! adding a draw in one place cannot shift the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const DENOISE: u64 = 2;
    pub const VERIFY: u64 = 3;
    pub const TRAIN_MAIN: u64 = 4;
    pub const TRAIN_DRAFT: u64 = 5;
    pub const TEACHER: u64 = 6;
    pub const INIT: u64 = 7;
    pub const DATASET: u64 = 8;
    pub const DIAGNOSTICS: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of identifiers into a 64-bit stream key.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &id| splitmix(acc ^ splitmix(id)))
}

pub fn stream_rng(base: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, path))
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
