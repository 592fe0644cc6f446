use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Deterministic generator. Streams are reproducible per seed; independent
/// sub-streams come from [`SeededRng::derive`].
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A generator keyed by `(seed, labels…)`, e.g. `(global_seed, epoch, sample)`.
    pub fn derive(seed: u64, labels: &[u64]) -> Self {
        let key = labels
            .iter()
            .fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)));
        Self::new(key)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform in [lo, hi]; returns `lo` when the range is empty.
    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        if hi <= lo {
            lo
        } else {
            lo + (hi - lo) * self.uniform()
        }
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        p > 0.0 && self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n.max(1))
    }

    pub fn normal(&mut self) -> f32 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        z as f32
    }

    /// Symmetric Beta(α, α) via the gamma ratio `X / (X + Y)`.
    pub fn beta(&mut self, alpha: f32) -> Result<f32> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("beta", format!("alpha must be positive, got {alpha}")));
        }
        let gamma = Gamma::new(alpha as f64, 1.0)
            .map_err(|e| Error::invalid("beta", e.to_string()))?;
        loop {
            let x = gamma.sample(&mut self.inner);
            let y = gamma.sample(&mut self.inner);
            let total = x + y;
            if total > 0.0 {
                return Ok((x / total) as f32);
            }
        }
    }

    /// Uniform random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.inner);
        p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}
