use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Real;

/// Seeded weight initializer.
///
/// Samples are drawn in `f64` and then cast, so an `f32` and an `f64` model
/// built from the same seed hold the same values up to rounding.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<F: Real>(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut self.rng;
        ArrayD::from_shape_simple_fn(IxDyn(shape), || F::lit(dist.sample(rng)))
    }

    /// He-normal init for a layer feeding a ReLU.
    pub fn he<F: Real>(&mut self, shape: &[usize], fan_in: usize) -> ArrayD<F> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    pub fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn filled<F: Real>(shape: &[usize], value: f64) -> ArrayD<F> {
        ArrayD::from_elem(IxDyn(shape), F::lit(value))
    }
}
