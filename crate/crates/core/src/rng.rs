//! Seeded random streams.
//!
//! Every draw in the crate comes from ChaCha20 (a 64-bit-seeded,
//! counter-based generator) keyed by `(seed, stream)`. The stream id selects
//! an independent ChaCha stream, so adding draws to one purpose (say, a new
//! verification suite) never shifts the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seed used whenever none is supplied.
pub const DEFAULT_SEED: u64 = 0x1A3B_DA00_5EED_0001;

/// Purpose tag occupying the high 32 bits of a stream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    Params = 1,
    Data = 2,
    Masks = 3,
    Suite = 4,
    Functional = 5,
}

pub struct StreamRng {
    inner: ChaCha20Rng,
}

impl StreamRng {
    /// Stream `(tag << 32) | index` of the generator seeded with `seed`.
    pub fn new(seed: u64, tag: Stream, index: u32) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(((tag as u64) << 32) | index as u64);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Tensor of independent `N(0, std^2)` draws, filled in row-major order.
    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(std * self.normal()))
    }

    /// Tensor of independent `U(lo, hi)` draws.
    pub fn uniform_tensor<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::from_f64(lo + (hi - lo) * self.uniform()))
    }
}
