//! Seed derivation and Gaussian draws.
//!
//! Every random quantity in the pipeline comes from a `ChaCha8Rng` seeded by
//! [`derive_seed`], so results depend only on the master seed and the
//! position of the draw, never on call order across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for `(master, path...)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |h, &p| mix(h ^ mix(p)))
}

/// Stream tags so unrelated consumers of one master seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const BASE_TRAIN: u64 = 2;
    pub const LORA_TRAIN: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const SYNONYM: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const NORM_TABLE: u64 = 8;
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

pub fn normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    standard_normal(shape, rng).scale(std)
}
