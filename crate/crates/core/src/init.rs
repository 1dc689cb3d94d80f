//! Parameter initializers. Each draws from a stream keyed by the parameter
//! name, so initial values do not depend on which other parameters exist.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Scalar, Tensor};
use crate::rng;

/// Glorot-uniform for a `fan_in × fan_out` weight.
pub fn xavier<F: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(seed, name, &[fan_in, fan_out], a)
}

/// Uniform in `[-a, a]`.
pub fn uniform<F: Scalar>(seed: u64, name: &str, shape: &[usize], a: f64) -> Tensor<F> {
    let mut r = rng::stream(seed, name);
    Tensor::from_fn(shape, |_| F::of(r.gen_range(-a..=a)))
}

pub fn normal<F: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<F> {
    let mut r = rng::stream(seed, name);
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| F::of(d.sample(&mut r)))
}
