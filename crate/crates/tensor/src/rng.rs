//! Seeded randomness.
//!
//! Draws come from ChaCha8, whose output stream is fixed by its published
//! algorithm, so a seed reproduces the same sequence on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this seed; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor<T> {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::lit(self.uniform(-bound, bound)))
            .collect();
        Tensor::from_vec(shape, data).expect("finite draws")
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(|_| T::lit(std * self.normal())).collect();
        Tensor::from_vec(shape, data).expect("finite draws")
    }
}
