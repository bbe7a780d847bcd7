use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{Scalar, Tensor};

/// Seeded generator backed by ChaCha8.
///
/// ChaCha8 output is defined bit-for-bit by its seed and stream number, so the
/// same seed yields the same stream on every platform. Independent
/// sub-generators are derived with [`Rng::split`], which keeps the seed and
/// selects a different ChaCha stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "ChaCha8 (rand_chacha), seed_from_u64";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator on ChaCha stream `stream` of the same seed.
    pub fn split(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform_tensor<T: Scalar>(&mut self, dims: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(dims, |_| T::lit(self.uniform(lo, hi))).expect("valid dims")
    }

    pub fn normal_tensor<T: Scalar>(&mut self, dims: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(dims, |_| T::lit(std * self.normal())).expect("valid dims")
    }

    pub fn uniform_vec<T: Scalar>(&mut self, len: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..len).map(|_| T::lit(self.uniform(lo, hi))).collect()
    }
}
