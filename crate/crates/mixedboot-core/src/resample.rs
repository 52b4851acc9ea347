//! Sampling primitives under a deterministic, splittable randomness contract.
//!
//! A [`RandomSource`] is a `(seed, stream_id)` pair; identical pairs produce
//! identical draw sequences on every platform, and distinct stream ids give
//! independent streams of one seed. Bootstrap engines hand replicate `b` the
//! stream `stream_id = b`, which is what makes serial and parallel execution
//! agree bit for bit.
//!
//! Categorical sampling (SRS and PPS with replacement) goes through one
//! inverse-CDF pathway: a normalized cumulative-weight table searched per
//! uniform draw. Because each table entry is a single correctly-rounded
//! division of exact integer prefix sums, PPS with equal integer sizes builds
//! the same table as SRS and therefore reproduces it exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use crate::error::{Error, Result};

/// The concrete stream generator. ChaCha output is portable and
/// endianness-independent, so the reproducibility contract holds across
/// platforms for a locked dependency set.
pub type StreamRng = ChaCha8Rng;

/// A value-like handle on one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomSource {
    pub seed: u64,
    pub stream_id: u64,
}

impl RandomSource {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Instantiate the stream. Sequential draws thread the returned generator.
    pub fn rng(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Mix `(seed, tag, index)` into a fresh 64-bit seed (SplitMix64 finalizer
/// chain). Used to give simulations and per-method engine runs unrelated
/// seeds from one master seed.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ tag) ^ index)
}

/// Normalized cumulative weight table for inverse-CDF categorical draws.
#[derive(Debug, Clone)]
pub struct CumulativeWeights {
    cum: Vec<f64>,
}

impl CumulativeWeights {
    /// Equal weights over `len` categories; entry `k` is `(k+1)/len` exactly
    /// as one division.
    pub fn equal(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid("empty sampling pool".into()));
        }
        let total = len as f64;
        let cum = (1..=len).map(|k| k as f64 / total).collect();
        Ok(Self { cum })
    }

    /// Weights proportional to `sizes`; entry `k` is `prefix_k / total` as one
    /// division. Integer-valued sizes keep prefix sums exact, which is what
    /// makes equal sizes reproduce [`CumulativeWeights::equal`] bit for bit.
    pub fn proportional(sizes: &[f64]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Invalid("empty sampling pool".into()));
        }
        if sizes.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Invalid("negative or non-finite size weight".into()));
        }
        let mut prefix = Vec::with_capacity(sizes.len());
        let mut acc = 0.0;
        for &w in sizes {
            acc += w;
            prefix.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::Invalid("size weights sum to zero".into()));
        }
        Ok(Self { cum: prefix.into_iter().map(|s| s / acc).collect() })
    }

    /// One draw: the first index whose cumulative weight exceeds `u`.
    #[inline]
    pub fn search(&self, u: f64) -> usize {
        let idx = self.cum.partition_point(|&c| c <= u);
        idx.min(self.cum.len() - 1)
    }

    /// `count` independent draws from `rng`.
    pub fn draw(&self, count: usize, rng: &mut StreamRng) -> Vec<usize> {
        (0..count).map(|_| self.search(rng.random::<f64>())).collect()
    }
}

/// Simple random sampling with replacement: `count` index draws over `0..len`.
pub fn srswr_indices(len: usize, count: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    Ok(CumulativeWeights::equal(len)?.draw(count, rng))
}

/// SRSWR over concrete values.
pub fn srswr(values: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let idx = srswr_indices(values.len(), count, rng)?;
    Ok(idx.into_iter().map(|i| values[i]).collect())
}

/// Probability-proportional-to-size sampling with replacement:
/// index `i` is drawn with probability `sizes[i] / sum(sizes)`.
pub fn ppswr_indices(sizes: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    Ok(CumulativeWeights::proportional(sizes)?.draw(count, rng))
}

/// PPSWR over concrete values.
pub fn ppswr(values: &[f64], sizes: &[f64], count: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if values.len() != sizes.len() {
        return Err(Error::Invalid(format!(
            "values ({}) and sizes ({}) differ in length",
            values.len(),
            sizes.len()
        )));
    }
    let idx = ppswr_indices(sizes, count, rng)?;
    Ok(idx.into_iter().map(|i| values[i]).collect())
}

/// `count` draws of N(mean, sd^2); `sd = 0` returns the constant vector
/// without consuming the stream.
pub fn draw_normal(mean: f64, sd: f64, count: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
    if sd < 0.0 || !sd.is_finite() {
        return Err(Error::Invalid(format!("sd = {sd} must be >= 0")));
    }
    if sd == 0.0 {
        return Ok(vec![mean; count]);
    }
    Ok((0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            mean + sd * z
        })
        .collect())
}

/// `count` draws of `(chi2_1 - 1)/sqrt(2)`: mean 0, variance 1, skewed.
pub fn draw_chisq1_standardized(count: usize, rng: &mut StreamRng) -> Vec<f64> {
    let inv_sqrt2 = 1.0 / core::f64::consts::SQRT_2;
    (0..count)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * z - 1.0) * inv_sqrt2
        })
        .collect()
}

/// `count` draws of Exp(1).
pub fn draw_exp1(count: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..count).map(|_| rng.sample::<f64, _>(Exp1)).collect()
}
