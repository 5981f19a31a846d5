use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian weights with variance `2 / fan_in`.
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<f32> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}

/// Gaussian weights scaled by `gain / sqrt(fan_in)`.
pub fn scaled_normal(rng: &mut Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<f32> {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| (rng.normal() * std) as f32)
}
