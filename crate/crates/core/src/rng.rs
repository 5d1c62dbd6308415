//! Seeded random sources shared by the check suites, benchmarks and examples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Dims, Element, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Standard-normal tensor.
pub fn normal_tensor<T: Element>(rng: &mut impl Rng, dims: Dims) -> Tensor<T> {
    let data = normal_vec(rng, dims.numel())
        .into_iter()
        .map(T::from_f64)
        .collect();
    Tensor::from_parts(dims, data)
}

/// Uniform tensor on `[lo, hi)`.
pub fn uniform_tensor<T: Element>(rng: &mut impl Rng, dims: Dims, lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..dims.numel())
        .map(|_| T::from_f64(rng.gen_range(lo..hi)))
        .collect();
    Tensor::from_parts(dims, data)
}
