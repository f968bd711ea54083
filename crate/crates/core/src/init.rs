use rand::Rng;

use crate::tensor::{Real, Tensor};

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
}

/// Uniform in `±sqrt(6 / fan_in)`, which keeps activation variance through ReLU layers.
pub fn he_uniform<T: Real>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
}

/// Uniform in `[lo, hi)`.
pub fn uniform<T: Real>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
}
