//! Seeded, platform-independent random streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// ChaCha8-backed generator. Equal seeds (and stream ids) give bitwise-equal
/// draw sequences on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal with the given std, resampled outside `±bound` standard deviations.
    pub fn trunc_normal(&mut self, std: f64, bound: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= bound {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct values from `[0, n)` in random order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn normal_tensor<F: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(self.normal() * std)).collect();
        Tensor::from_vec(shape, data).expect("shape product matches")
    }

    pub fn uniform_tensor<F: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(self.uniform_range(lo, hi))).collect();
        Tensor::from_vec(shape, data).expect("shape product matches")
    }
}
