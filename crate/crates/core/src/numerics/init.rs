//! Parameter initializers.

use super::{Float, Result, RngState, Tensor};

/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` trainable tensor.
pub fn fan_in_uniform<T: Float>(rng: &mut RngState, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.uniform(-bound, bound))).collect();
    Tensor::param(data, shape)
}

pub fn zeros<T: Float>(shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::param(vec![T::zero(); shape.iter().product()], shape)
}

pub fn ones<T: Float>(shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::param(vec![T::one(); shape.iter().product()], shape)
}
