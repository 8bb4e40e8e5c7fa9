//! Deterministic random source used by every stochastic component.
//!
//! One stream per run, seeded from a u64. The stream position is exposed so
//! checkpoints can resume mid-run with bitwise-identical draws.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream position in 32-bit words, for checkpoint resume.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_scaled(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.normal()
    }

    /// exp(sigma * z), z ~ N(0,1). Multiplicative jitter around 1.
    pub fn log_normal(&mut self, sigma: f64) -> f64 {
        (sigma * self.normal()).exp()
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen::<bool>()
    }

    /// m distinct indices from [0, n), order randomized (partial Fisher-Yates).
    pub fn sample_indices(&mut self, n: usize, m: usize) -> Vec<usize> {
        debug_assert!(m <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(m);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Child stream whose seed is drawn from this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
