//! Counter-based seed derivation.
//!
//! Every random stream in the crate is addressed by a master seed plus a
//! small tuple of counters (domain, index, sub-index). Streams never share
//! state, so adding a view or a training step cannot perturb the draws of
//! any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Stream domains.
pub mod domain {
    pub const SHARED_NOISE: u64 = 1;
    pub const VIEW_NOISE: u64 = 2;
    pub const PARAM_INIT: u64 = 3;
    pub const BASE_STEP: u64 = 4;
    pub const FBA_STEP: u64 = 5;
    pub const SAMPLE_STEP: u64 = 6;
    pub const SCENE: u64 = 7;
    pub const BUNDLE: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a master seed and a counter tuple.
pub fn derive_seed(seed: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ domain.wrapping_mul(0x2545_f491_4f6c_dd1d));
    h = splitmix(h ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    splitmix(h ^ b.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Returns the generator for the stream `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, a, b))
}

/// Standard normal tensor drawn from `rng`.
pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches data length")
}
