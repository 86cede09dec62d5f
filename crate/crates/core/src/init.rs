//! Seeded parameter initialisation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// The generator used for every seeded draw in the crate.
pub type CrcRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> CrcRng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform in `[-bound, bound]` with `bound = sqrt(6 / fan_in)`.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut CrcRng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform(shape, -bound, bound, rng)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut CrcRng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..=hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
