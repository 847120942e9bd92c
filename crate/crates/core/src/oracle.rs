//! Independent verification machinery.
//!
//! The exact output distribution of one speculative position is
//!
//! ```text
//! P(x) = min(q(x), p̂(x)) + (1 − β) · residual(x),    β = Σ min(q, p̂)
//! ```
//!
//! where `residual` is the clamped and ℓ1-normalized `p − min(q, p̂)` that the
//! engine samples from. When `p(x) < min(q(x), p̂(x))` somewhere, clamping
//! binds, the residual's normalizer exceeds `1 − β`, and `P` drifts away from
//! `p`. With `η = 0` it never binds and `P = p` exactly.
//!
//! Everything here is computed from the three vectors directly; the Monte
//! Carlo helpers are the only part that runs engine code.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::{augmented_target, PositionKernel};
use crate::error::{Error, Result};
use crate::json::{sig17, sig17_vec};
use crate::lm::{LogitVector, ProbVector, Token};
use crate::sampling::{
    distillation_loss, kd_gradient, kl_divergence, softmax_values, total_variation, RngStream, Temperature,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepDistributionReport {
    pub exact_output: ProbVector,
    pub target_p: ProbVector,
    /// `½‖exact_output − p‖₁`.
    #[serde(serialize_with = "sig17")]
    pub tv_distance: f64,
    /// `Σ min(q, p̂)`, the acceptance probability.
    #[serde(serialize_with = "sig17")]
    pub beta: f64,
    /// Output when the clamped residual is divided by `1 − β` instead of its
    /// own mass. Not a distribution when clamping binds.
    #[serde(serialize_with = "sig17_vec")]
    pub fixed_normalizer_output: Vec<f64>,
    #[serde(serialize_with = "sig17")]
    pub tv_fixed_normalizer: f64,
}

pub fn exact_step_distribution(p: &ProbVector, p_hat: &ProbVector, q: &ProbVector) -> Result<StepDistributionReport> {
    let n = p.len();
    if p_hat.len() != n || q.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if p_hat.len() != n { p_hat.len() } else { q.len() },
        });
    }
    let overlap: Vec<f64> = (0..n).map(|i| q[i].min(p_hat[i])).collect();
    let beta: f64 = overlap.iter().sum();
    let leftover: Vec<f64> = (0..n).map(|i| (p[i] - overlap[i]).max(0.0)).collect();
    let mass: f64 = leftover.iter().sum();
    let residual: Vec<f64> =
        if mass > 0.0 { leftover.iter().map(|r| r / mass).collect() } else { p.as_slice().to_vec() };

    let output: Vec<f64> = (0..n).map(|i| overlap[i] + (1.0 - beta) * residual[i]).collect();
    let fixed_normalizer_output: Vec<f64> = (0..n).map(|i| overlap[i] + leftover[i]).collect();
    let tv_distance = total_variation(&output, p.as_slice());
    let tv_fixed_normalizer = total_variation(&fixed_normalizer_output, p.as_slice());
    let total: f64 = output.iter().sum();
    let exact_output = ProbVector::new(output.into_iter().map(|x| x / total).collect())?;
    Ok(StepDistributionReport {
        exact_output,
        target_p: p.clone(),
        tv_distance,
        beta,
        fixed_normalizer_output,
        tv_fixed_normalizer,
    })
}

/// Empirical frequencies of `trial` over `n` independent runs.
pub fn monte_carlo_step<F>(mut trial: F, vocab_size: usize, n: usize, rng: &mut RngStream) -> Result<ProbVector>
where
    F: FnMut(&mut RngStream) -> Result<Token>,
{
    if n == 0 {
        return Err(Error::EmptyInput("Monte Carlo draw count"));
    }
    let mut counts = vec![0u64; vocab_size];
    for _ in 0..n {
        let x = trial(rng)? as usize;
        if x >= vocab_size {
            return Err(Error::Invariant(format!("trial produced token {x} outside vocabulary {vocab_size}")));
        }
        counts[x] += 1;
    }
    ProbVector::new(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Output counts and acceptance count of repeated single-position trials.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSample {
    pub counts: Vec<u64>,
    pub accepted: u64,
    pub n: u64,
}

impl KernelSample {
    pub fn frequencies(&self) -> ProbVector {
        ProbVector::new(self.counts.iter().map(|&c| c as f64 / self.n as f64).collect()).expect("counts sum to n")
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.accepted as f64 / self.n as f64
    }
}

/// Runs `n` engine trials split across `shards` parallel streams seeded
/// `seed + shard`, merged by summation.
pub fn monte_carlo_kernel(kernel: &PositionKernel, n: u64, seed: u64, shards: u64) -> Result<KernelSample> {
    let shards = shards.max(1);
    let vocab = kernel.p.len();
    let parts = (0..shards)
        .into_par_iter()
        .map(|s| {
            let m = n / shards + u64::from(s < n % shards);
            let mut rng = RngStream::derived(seed, s);
            let mut counts = vec![0u64; vocab];
            let mut accepted = 0;
            for _ in 0..m {
                let v = kernel.trial(&mut rng)?;
                counts[v.token() as usize] += 1;
                accepted += u64::from(v.accepted());
            }
            Ok(KernelSample { counts, accepted, n: m })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = KernelSample { counts: vec![0; vocab], accepted: 0, n: 0 };
    for part in parts {
        total.counts.iter_mut().zip(&part.counts).for_each(|(a, b)| *a += b);
        total.accepted += part.accepted;
        total.n += part.n;
    }
    Ok(total)
}

/// Max relative error of the analytic distillation gradient against central
/// differences of `T²·KL(q ‖ softmax(z/T))`: `max_i |a_i − fd_i| / (|fd_i| + 1e-12)`.
///
/// Returns infinity when `q` has mass where `softmax(z/T)` underflows to zero.
pub fn fd_gradient_check(z: &LogitVector, q: &ProbVector, t: Temperature, h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("finite-difference step must be in [1e-7, 1e-3], got {h}")));
    }
    let p = softmax_values(z.as_slice(), t.get());
    if p.iter().zip(q.iter()).any(|(&pi, &qi)| qi > 0.0 && pi == 0.0) {
        return Ok(f64::INFINITY);
    }
    let analytic = kd_gradient(z, q, t)?;
    let fd = finite_difference_gradient(z.as_slice(), q.as_slice(), t.get(), h);
    Ok(analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs() / (f.abs() + 1e-12)).fold(0.0, f64::max))
}

/// Central differences of the distillation loss.
pub fn finite_difference_gradient(z: &[f64], q: &[f64], t: f64, h: f64) -> Vec<f64> {
    let mut work = z.to_vec();
    (0..z.len())
        .map(|i| {
            work[i] = z[i] + h;
            let plus = distillation_loss(&work, q, t);
            work[i] = z[i] - h;
            let minus = distillation_loss(&work, q, t);
            work[i] = z[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// One row of an η sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaPoint {
    #[serde(serialize_with = "sig17")]
    pub eta: f64,
    /// `KL(q ‖ p̂_raw)`, measured before tail preservation.
    #[serde(serialize_with = "sig17")]
    pub kl_q_phat: f64,
    #[serde(serialize_with = "sig17")]
    pub tv_output_vs_p: f64,
    #[serde(serialize_with = "sig17")]
    pub beta: f64,
    #[serde(serialize_with = "sig17")]
    pub tv_fixed_normalizer: f64,
}

/// Divergence to the drafter and distortion of the output for each `η`.
pub fn eta_divergence_curve(
    z: &LogitVector,
    q: &ProbVector,
    t: Temperature,
    alpha: f64,
    etas: &[f64],
) -> Result<Vec<EtaPoint>> {
    if etas.first() != Some(&0.0) {
        return Err(Error::Config("eta grid must start at 0".into()));
    }
    if etas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("eta grid must be strictly ascending".into()));
    }
    etas.iter()
        .map(|&eta| {
            let aug = augmented_target(z, q, eta, t, alpha)?;
            let report = exact_step_distribution(&aug.p, &aug.p_hat, q)?;
            Ok(EtaPoint {
                eta,
                kl_q_phat: kl_divergence(q.as_slice(), aug.p_hat_raw.as_slice()),
                tv_output_vs_p: report.tv_distance,
                beta: report.beta,
                tv_fixed_normalizer: report.tv_fixed_normalizer,
            })
        })
        .collect()
}

/// CSV with columns `eta,kl_q_phat,tv_output_vs_p,beta,tv_appendixB_variant`.
///
/// The last column is the distortion of the fixed `1 − β` normalizer.
pub fn eta_curve_csv(points: &[EtaPoint]) -> String {
    let mut out = String::from("# tv_* columns are total variation distance, 0.5 * L1\n");
    out.push_str("eta,kl_q_phat,tv_output_vs_p,beta,tv_appendixB_variant\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            p.eta, p.kl_q_phat, p.tv_output_vs_p, p.beta, p.tv_fixed_normalizer
        );
    }
    out
}

/// Every point of the probability simplex in dimension `dim` whose
/// coordinates are multiples of `1/steps`.
pub fn simplex_grid(dim: usize, steps: usize) -> Vec<ProbVector> {
    fn rec(dim: usize, left: usize, steps: usize, cur: &mut Vec<usize>, out: &mut Vec<ProbVector>) {
        if cur.len() + 1 == dim {
            cur.push(left);
            let v = cur.iter().map(|&c| c as f64 / steps as f64).collect();
            out.push(ProbVector::new(v).expect("grid point on simplex"));
            cur.pop();
            return;
        }
        for k in 0..=left {
            cur.push(k);
            rec(dim, left - k, steps, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, steps, steps, &mut Vec::with_capacity(dim), &mut out);
    out
}

/// Random distribution with full support: softmax of uniform logits in `[-spread, spread]`.
pub fn random_distribution(rng: &mut RngStream, n: usize, spread: f64) -> ProbVector {
    ProbVector::new(softmax_values(&random_logits(rng, n, spread), 1.0)).expect("softmax is a distribution")
}

/// Uniform logits in `[-bound, bound]`.
pub fn random_logits(rng: &mut RngStream, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect()
}

/// Uniform integer in `lo..=hi`.
pub fn random_range(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + (rng.uniform() * (hi - lo + 1) as f64) as usize
}
