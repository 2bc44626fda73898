use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape matches data")
}

/// Entries drawn from `N(0, std²)`.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..numel).map(|_| dist.sample(rng)).collect()).expect("shape matches data")
}
