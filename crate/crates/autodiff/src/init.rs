use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// He-Normal initialization: samples from `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(AutodiffError::InvalidArgument { op: "he_normal", detail: "fan_in must be positive".into() });
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Ok(Tensor::from_fn(shape, |_| normal.sample(rng)))
}
