//! Seeded weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Precision, Tensor};

/// Deterministic source of initial parameters.
pub struct Initializer {
    rng: ChaCha8Rng,
    precision: Precision,
}

impl Initializer {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Zero-mean normal with standard deviation `gain / sqrt(fan_in)`.
    pub fn fan_in(&mut self, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor> {
        self.normal(shape, gain / (fan_in as f64).sqrt())
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::param(shape, data, self.precision)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::param(shape, vec![value; shape.iter().product()], self.precision)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Result<Tensor> {
        self.constant(shape, 0.0)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Result<Tensor> {
        self.constant(shape, 1.0)
    }

    /// Non-trainable standard-normal tensor (inputs for tests and probes).
    pub fn sample(&mut self, shape: &[usize]) -> Result<Tensor> {
        Ok(self.normal(shape, 1.0)?.detach())
    }
}
