//! Numeric primitives shared by the engine and the oracle.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::lm::{LogitVector, ProbVector, Token};

/// Identifier of the generator behind [`RngStream`], recorded in run manifests.
pub const RNG_ALGORITHM: &str = "chacha20 (rand_chacha 0.3, seed_from_u64); uniform = (next_u64 >> 11) * 2^-53";

/// Sampling temperature, strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::Config(format!("temperature must be positive and finite, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

/// Seeded, platform-independent stream of uniform draws.
///
/// ChaCha20 output is specified bit-for-bit, and uniforms are built from the
/// top 53 bits of each word, so a seed fixes the draw sequence everywhere.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// Independent stream for run `index` of a batch seeded with `seed`.
    pub fn derived(seed: u64, index: u64) -> Self {
        Self::new(seed.wrapping_add(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// `softmax(z / T)`, computed with max-subtraction.
pub fn softmax_t(z: &LogitVector, t: Temperature) -> ProbVector {
    let values = softmax_values(z.as_slice(), t.get());
    ProbVector::new(values).expect("softmax of finite logits is a distribution")
}

pub(crate) fn softmax_values(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log softmax(z / T)`, stable for large logit gaps.
pub fn log_softmax_t(z: &[f64], t: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = z.iter().map(|&v| (v - max) / t).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

/// Draws a token from `p` by inverse CDF over ascending token ids.
pub fn sample_categorical(p: &ProbVector, rng: &mut RngStream) -> Result<Token> {
    inverse_cdf(p.as_slice(), rng.uniform())
}

/// First token whose cumulative mass exceeds `u`. Entries need not sum to one;
/// `u` is scaled by the total. Rounding past the end lands on the last token
/// with positive mass.
pub fn inverse_cdf(weights: &[f64], u: f64) -> Result<Token> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidDistribution("cannot sample from a vector with no mass".into()));
    }
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if target < acc {
                return Ok(i as Token);
            }
        }
    }
    Ok(last_positive as Token)
}

/// `max(v, 0) / ‖max(v, 0)‖₁`.
pub fn norm_clamped(v: &[f64]) -> Result<ProbVector> {
    let clamped: Vec<f64> = v.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateResidual);
    }
    ProbVector::new(clamped.into_iter().map(|x| x / total).collect())
}

/// Gradient of `T²·KL(q ‖ softmax(z/T))` with respect to `z`: `T·(p − q)`.
///
/// A descent step `z − η·grad` is therefore `z + ηT(q − p)`.
pub fn kd_gradient(z: &LogitVector, q: &ProbVector, t: Temperature) -> Result<Vec<f64>> {
    if z.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: z.len(), got: q.len() });
    }
    let p = softmax_values(z.as_slice(), t.get());
    Ok(p.iter().zip(q.iter()).map(|(pi, qi)| t.get() * (pi - qi)).collect())
}

/// `KL(q ‖ p)` with `0·log(0/·) = 0`; infinite when `q` has mass where `p` has none.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .map(|(&qi, &pi)| match (qi > 0.0, pi > 0.0) {
            (false, _) => 0.0,
            (true, false) => f64::INFINITY,
            (true, true) => qi * (qi.ln() - pi.ln()),
        })
        .sum()
}

/// Distillation loss `T²·KL(q ‖ softmax(z/T))`, evaluated through log-softmax.
pub fn distillation_loss(z: &[f64], q: &[f64], t: f64) -> f64 {
    let log_p = log_softmax_t(z, t);
    let kl: f64 = q
        .iter()
        .zip(&log_p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &lp)| if lp == f64::NEG_INFINITY { f64::INFINITY } else { qi * (qi.ln() - lp) })
        .sum();
    t * t * kl
}

/// Total variation distance `½‖a − b‖₁`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
