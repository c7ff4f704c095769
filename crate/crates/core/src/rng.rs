//! Deterministic random streams.
//!
//! Backed by ChaCha8, a counter-based generator: the output is a pure function of
//! `(seed, stream, word position)`, so a stream can be forked per sample index and
//! its exact position saved and restored.
//!
//! Uniform draws take the top 53 bits of a `u64` word (`(w >> 11) * 2^-53`); normal
//! draws use Box–Muller on two uniforms and discard the sine branch, so every normal
//! consumes exactly two words.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent substream `stream` of `seed`.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = Self::substream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // multiply-shift; bias is < n / 2^64
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform_scalar(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal_scalar(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    pub fn draw(&mut self, dist: Dist, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = match dist {
            Dist::Uniform { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::BadParam(format!("uniform({lo}, {hi})")));
                }
                (0..n).map(|_| self.uniform_scalar(lo, hi)).collect()
            }
            Dist::Normal { mean, std } => {
                if !(std >= 0.0) {
                    return Err(Error::BadParam(format!("normal sigma {std}")));
                }
                (0..n).map(|_| self.normal_scalar(mean, std)).collect()
            }
        };
        Tensor::new(shape, data)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
        self.draw(Dist::Uniform { lo, hi }, shape)
    }

    pub fn normal(&mut self, mean: f64, std: f64, shape: &[usize]) -> Result<Tensor> {
        self.draw(Dist::Normal { mean, std }, shape)
    }

    /// Fisher–Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_normal() {
        let mut rng = Rng::new(3);
        assert_eq!(rng.normal(0.0, 0.0, &[4]).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = Rng::new(99).normal(1.0, 2.0, &[3, 3]).unwrap();
        let b = Rng::new(99).normal(1.0, 2.0, &[3, 3]).unwrap();
        assert_eq!(a, b);
        let c = Rng::new(100).normal(1.0, 2.0, &[3, 3]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_mean_converges() {
        let mut rng = Rng::new(2024);
        let draws = rng.uniform(0.0, 1.0, &[100_000]).unwrap();
        let mean = draws.sum() / 1e5;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!(draws.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn bad_params_rejected() {
        let mut rng = Rng::new(0);
        assert!(matches!(rng.uniform(1.0, 0.0, &[2]), Err(Error::BadParam(_))));
        assert!(matches!(rng.normal(0.0, -1.0, &[2]), Err(Error::BadParam(_))));
    }

    #[test]
    fn state_roundtrip_resumes_stream() {
        let mut rng = Rng::substream(5, 17);
        rng.uniform(0.0, 1.0, &[13]).unwrap();
        let saved = rng.state();
        let expected = rng.uniform(0.0, 1.0, &[8]).unwrap();
        let mut resumed = Rng::from_state(saved);
        assert_eq!(resumed.uniform(0.0, 1.0, &[8]).unwrap(), expected);
    }

    #[test]
    fn substreams_differ() {
        let a = Rng::substream(1, 0).next_u64();
        let b = Rng::substream(1, 1).next_u64();
        assert_ne!(a, b);
    }
}
