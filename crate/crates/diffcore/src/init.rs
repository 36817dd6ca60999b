//! Parameter initializers. Values are drawn in `f64` and then converted, so
//! `f32` and `f64` models built from one seed agree up to rounding.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

pub fn zeros<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}
