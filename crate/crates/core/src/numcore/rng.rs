use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::{numel, Tensor};

/// Seedable counter-based generator (ChaCha8). Independent substreams are
/// addressed by a `(seed, key)` pair, so keyed consumers never share state.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `key` of `seed`.
    pub fn substream(seed: u64, key: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(key);
        Rng { inner }
    }

    /// Derive an independent child stream from the current state.
    pub fn fork(&mut self, key: u64) -> Self {
        let seed = self.inner.random::<u64>();
        Rng::substream(seed, key)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
    }

    /// i.i.d. standard-normal tensor.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let data = (0..numel(shape)).map(|_| self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Normal tensor with the given standard deviation.
    pub fn gaussian_scaled(&mut self, shape: &[usize], std: f64) -> Tensor {
        let data = (0..numel(shape)).map(|_| std * self.normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
