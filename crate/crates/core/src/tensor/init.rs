//! Weight initializers. Biases start at zero everywhere.

use rand::Rng;

use super::Tensor;

/// He/Kaiming normal: std `sqrt(2 / fan_in)`, for layers feeding relu-family activations.
pub fn kaiming(dims: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot/Xavier normal: std `sqrt(2 / (fan_in + fan_out))`, for sigmoid/tanh gates and linear outputs.
pub fn xavier(
    dims: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor {
    Tensor::randn(dims, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}
