//! The invariant suites behind `rapid verify`.
//!
//! The two kernels most prone to silent numerical mistakes, the distillation
//! gradient and tail preservation, are reached through [`Kernels`] so a test
//! can swap in a deliberately broken version and watch the suites catch it.
//!
//! Every suite walks its cases in order of increasing vocabulary (or context)
//! size and reports the smallest failing case.

use std::fmt;

use serde::Serialize;

use crate::engine::{augment_logits, tail_preserve, tail_substitute, PositionKernel};
use crate::lm::{LogitVector, ProbVector, Token};
use crate::oracle::{
    exact_step_distribution, finite_difference_gradient, monte_carlo_kernel, random_distribution, random_logits,
    random_range, simplex_grid,
};
use crate::retrieval::{chunk_context, retrieval_budget, retrieve, RetrievalConfig};
use crate::sampling::{
    inverse_cdf, kd_gradient, sample_categorical, softmax_t, total_variation, RngStream, Temperature,
};

pub type GradientFn = fn(&[f64], &[f64], f64) -> Vec<f64>;
pub type TailFn = fn(&[f64], &[f64], f64) -> Vec<f64>;

/// Implementations under test.
#[derive(Clone, Copy)]
pub struct Kernels {
    /// `(z, q, T) ↦ ∂L/∂z`.
    pub kd_gradient: GradientFn,
    /// `(p, p̂_raw, α) ↦ p̂`.
    pub tail_preserve: TailFn,
}

fn reference_gradient(z: &[f64], q: &[f64], t: f64) -> Vec<f64> {
    let z = LogitVector::new(z.to_vec()).expect("finite logits");
    let q = ProbVector::new(q.to_vec()).expect("valid q");
    kd_gradient(&z, &q, Temperature::new(t).expect("positive temperature")).expect("matching lengths")
}

fn reference_tail(p: &[f64], raw: &[f64], alpha: f64) -> Vec<f64> {
    let p = ProbVector::new(p.to_vec()).expect("valid p");
    let raw = ProbVector::new(raw.to_vec()).expect("valid p_hat_raw");
    tail_preserve(&p, &raw, alpha).expect("matching lengths").into_inner()
}

fn flipped_gradient(z: &[f64], q: &[f64], t: f64) -> Vec<f64> {
    reference_gradient(z, q, t).into_iter().map(|g| -g).collect()
}

impl Kernels {
    pub fn reference() -> Self {
        Self { kd_gradient: reference_gradient, tail_preserve: reference_tail }
    }

    pub fn with_mutation(mutation: Mutation) -> Self {
        let mut k = Self::reference();
        match mutation {
            Mutation::KdSignFlip => k.kd_gradient = flipped_gradient,
            Mutation::TailNoRenormalize => k.tail_preserve = tail_substitute,
        }
        k
    }
}

impl Default for Kernels {
    fn default() -> Self {
        Self::reference()
    }
}

/// Deliberate faults used to check that the suites have teeth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// `kd_gradient` returns `T(q − p)`.
    KdSignFlip,
    /// `tail_preserve` skips the final ℓ1 renormalization.
    TailNoRenormalize,
}

impl Mutation {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "kd-sign-flip" => Some(Self::KdSignFlip),
            "tail-no-renorm" => Some(Self::TailNoRenormalize),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseFailure {
    /// Vocabulary size, or context length for retrieval cases.
    pub size: usize,
    pub case: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    /// Smallest failing case.
    pub minimal_failure: Option<CaseFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }

    pub fn failed_suites(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{status} {:<24} {:>6} cases, {} failed", s.name, s.cases, s.failures)?;
            if let Some(c) = &s.minimal_failure {
                writeln!(f, "     minimal case (size {}): {}", c.size, c.case)?;
                writeln!(f, "     {}", c.detail)?;
            }
        }
        write!(f, "{}", if self.passed { "all suites passed" } else { "verification FAILED" })
    }
}

struct Suite {
    name: &'static str,
    cases: usize,
    failures: usize,
    minimal: Option<CaseFailure>,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, failures: 0, minimal: None }
    }

    fn check(&mut self, size: usize, case: impl FnOnce() -> String, outcome: Result<(), String>) {
        self.cases += 1;
        if let Err(detail) = outcome {
            self.failures += 1;
            if self.minimal.as_ref().is_none_or(|m| size < m.size) {
                self.minimal = Some(CaseFailure { size, case: case(), detail });
            }
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.failures == 0,
            cases: self.cases,
            failures: self.failures,
            minimal_failure: self.minimal,
        }
    }
}

pub const GRADIENT_SUITE: &str = "distillation_gradient";
pub const LOSSLESS_SUITE: &str = "classical_losslessness";
pub const BETA_SUITE: &str = "beta_consistency";
pub const TAIL_SUITE: &str = "tail_preservation";
pub const RETRIEVAL_SUITE: &str = "retrieval";
pub const SAMPLING_SUITE: &str = "sampling";

const ALPHA: f64 = 0.1;

/// Runs every suite against `kernels`, drawing random cases from `seed`.
pub fn run_verify(kernels: &Kernels, seed: u64) -> VerifyReport {
    let suites = vec![
        gradient_suite(kernels, seed),
        lossless_suite(kernels, seed.wrapping_add(1)),
        beta_suite(kernels, seed.wrapping_add(2)),
        tail_suite(kernels, seed.wrapping_add(3)),
        retrieval_suite(seed.wrapping_add(4)),
        sampling_suite(seed.wrapping_add(5)),
    ];
    VerifyReport { seed, passed: suites.iter().all(|s| s.passed), suites }
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradient_suite(k: &Kernels, seed: u64) -> SuiteResult {
    let mut suite = Suite::new(GRADIENT_SUITE);
    let mut rng = RngStream::new(seed);
    for n in [2, 3, 4, 8, 16, 32] {
        for t in [0.5, 1.0, 2.0] {
            for _ in 0..6 {
                let z = random_logits(&mut rng, n, 3.0);
                let q = random_distribution(&mut rng, n, 2.0);
                let analytic = (k.kd_gradient)(&z, q.as_slice(), t);
                let fd = finite_difference_gradient(&z, q.as_slice(), t, 1e-5);
                let rel = analytic.iter().zip(&fd).map(|(a, f)| (a - f).abs() / (f.abs() + 1e-12)).fold(0.0, f64::max);
                let sum: f64 = analytic.iter().sum();
                let outcome = if analytic.len() != n {
                    Err(format!("gradient has {} entries, expected {n}", analytic.len()))
                } else if !(rel <= 1e-4) {
                    Err(format!("max relative error against finite differences {rel:.3e} > 1e-4"))
                } else if sum.abs() > 1e-9 {
                    Err(format!("gradient sums to {sum:.3e}, expected 0"))
                } else {
                    Ok(())
                };
                suite.check(n, || format!("T={t} z={} q={}", fmt_vec(&z), fmt_vec(q.as_slice())), outcome);
            }
        }
    }
    suite.finish()
}

/// `p̂` from the kernel under test, validated as a distribution.
fn kernel_p_hat(k: &Kernels, p: &ProbVector, raw: &ProbVector) -> Result<ProbVector, String> {
    let out = (k.tail_preserve)(p.as_slice(), raw.as_slice(), ALPHA);
    ProbVector::new(out.clone()).map_err(|e| format!("p_hat {} is not a distribution: {e}", fmt_vec(&out)))
}

fn lossless_suite(k: &Kernels, seed: u64) -> SuiteResult {
    let mut suite = Suite::new(LOSSLESS_SUITE);
    let check = |p: &ProbVector, q: &ProbVector| -> Result<(), String> {
        let p_hat = kernel_p_hat(k, p, p)?;
        let report = exact_step_distribution(p, &p_hat, q).map_err(|e| e.to_string())?;
        if report.tv_distance <= 1e-9 {
            Ok(())
        } else {
            Err(format!("TV(output, p) = {:.3e} with eta = 0", report.tv_distance))
        }
    };
    let mut rng = RngStream::new(seed);
    let mut random: Vec<(ProbVector, ProbVector)> = (0..200)
        .map(|_| {
            let n = random_range(&mut rng, 2, 8);
            (random_distribution(&mut rng, n, 3.0), random_distribution(&mut rng, n, 3.0))
        })
        .collect();
    random.sort_by_key(|(p, _)| p.len());
    for (p, q) in random.iter().filter(|(p, _)| p.len() < 3) {
        suite.check(p.len(), || format!("p={} q={}", fmt_vec(p.as_slice()), fmt_vec(q.as_slice())), check(p, q));
    }
    let grid = simplex_grid(3, 20);
    for p in &grid {
        for q in &grid {
            suite.check(3, || format!("p={} q={}", fmt_vec(p.as_slice()), fmt_vec(q.as_slice())), check(p, q));
        }
    }
    for (p, q) in random.iter().filter(|(p, _)| p.len() >= 3) {
        suite.check(p.len(), || format!("p={} q={}", fmt_vec(p.as_slice()), fmt_vec(q.as_slice())), check(p, q));
    }
    suite.finish()
}

struct AugmentedCase {
    eta: f64,
    z: Vec<f64>,
    q: ProbVector,
    p: ProbVector,
    raw: ProbVector,
}

impl AugmentedCase {
    fn random(rng: &mut RngStream, n: usize, eta: f64) -> Self {
        let z = random_logits(rng, n, 3.0);
        let q = random_distribution(rng, n, 3.0);
        let zl = LogitVector::new(z.clone()).expect("finite");
        let p = softmax_t(&zl, Temperature::ONE);
        let raw =
            softmax_t(&augment_logits(&zl, &p, &q, eta, Temperature::ONE).expect("same length"), Temperature::ONE);
        Self { eta, z, q, p, raw }
    }

    fn describe(&self) -> String {
        format!("eta={} z={} q={}", self.eta, fmt_vec(&self.z), fmt_vec(self.q.as_slice()))
    }
}

fn random_cases(seed: u64, count: usize) -> Vec<AugmentedCase> {
    let mut rng = RngStream::new(seed);
    let mut cases: Vec<AugmentedCase> = (0..count)
        .map(|i| {
            let n = random_range(&mut rng, 2, 8);
            let eta = [5.0, 20.0][i % 2];
            AugmentedCase::random(&mut rng, n, eta)
        })
        .collect();
    cases.sort_by_key(|c| c.p.len());
    cases
}

/// Acceptance probability must equal `Σ min(q, p̂) = 1 − TV(q, p̂)`, and the
/// engine's empirical acceptance rate must agree with it.
fn beta_suite(k: &Kernels, seed: u64) -> SuiteResult {
    let mut suite = Suite::new(BETA_SUITE);
    let cases = random_cases(seed, 60);
    for (i, c) in cases.iter().enumerate() {
        let out = (k.tail_preserve)(c.p.as_slice(), c.raw.as_slice(), ALPHA);
        let beta: f64 = out.iter().zip(c.q.iter()).map(|(a, b)| a.min(*b)).sum();
        let identity = 1.0 - total_variation(&out, c.q.as_slice());
        let outcome = if (beta - identity).abs() > 1e-12 {
            Err(format!("sum min(q, p_hat) = {beta:.15} but 1 - TV(q, p_hat) = {identity:.15}"))
        } else if i % 6 == 0 {
            monte_carlo_beta(c, &out, beta, seed.wrapping_add(i as u64))
        } else {
            Ok(())
        };
        suite.check(c.p.len(), || c.describe(), outcome);
    }
    suite.finish()
}

fn monte_carlo_beta(c: &AugmentedCase, p_hat: &[f64], beta: f64, seed: u64) -> Result<(), String> {
    const N: u64 = 200_000;
    let p_hat = ProbVector::new(p_hat.to_vec()).map_err(|e| e.to_string())?;
    let kernel = PositionKernel::new(c.p.clone(), p_hat, c.q.clone()).map_err(|e| e.to_string())?;
    let sample = monte_carlo_kernel(&kernel, N, seed, 4).map_err(|e| e.to_string())?;
    let sigma = (beta * (1.0 - beta) / N as f64).sqrt();
    let rate = sample.acceptance_rate();
    if (rate - beta).abs() <= 4.0 * sigma + 1e-12 {
        Ok(())
    } else {
        Err(format!("empirical acceptance {rate:.6} vs beta {beta:.6} (sigma {sigma:.2e})"))
    }
}

fn tail_suite(k: &Kernels, seed: u64) -> SuiteResult {
    let mut suite = Suite::new(TAIL_SUITE);
    for c in random_cases(seed, 100) {
        let out = (k.tail_preserve)(c.p.as_slice(), c.raw.as_slice(), ALPHA);
        let substituted = tail_substitute(c.p.as_slice(), c.raw.as_slice(), ALPHA);
        let mass: f64 = substituted.iter().sum();
        let sum: f64 = out.iter().sum();
        let outcome = if (sum - 1.0).abs() > 1e-12 {
            Err(format!("output sums to {sum:.15}"))
        } else {
            match out.iter().zip(&substituted).position(|(o, s)| (o * mass - s).abs() > 1e-12 * s.max(1e-300)) {
                Some(i) => Err(format!(
                    "entry {i}: output {:.6e} is not the substituted value {:.6e} renormalized",
                    out[i], substituted[i]
                )),
                None => Ok(()),
            }
        };
        suite.check(c.p.len(), || c.describe(), outcome);
    }
    suite.finish()
}

fn retrieval_suite(seed: u64) -> SuiteResult {
    let mut suite = Suite::new(RETRIEVAL_SUITE);
    let mut rng = RngStream::new(seed);
    let defaults = RetrievalConfig::default();
    for (len, expected) in [(122_880, 5_120), (4_096, 4_096), (983_040, 40_960), (1, 4_096)] {
        let got = retrieval_budget(len, &defaults);
        let outcome = if got == expected { Ok(()) } else { Err(format!("budget {got}, expected {expected}")) };
        suite.check(len, || format!("budget for context length {len}"), outcome);
    }
    let mut cases: Vec<(Vec<Token>, RetrievalConfig)> = (0..60)
        .map(|_| {
            let len = random_range(&mut rng, 1, 3000);
            let vocab = random_range(&mut rng, 2, 40) as u32;
            let context = (0..len).map(|_| (rng.uniform() * vocab as f64) as Token).collect();
            let chunk_size = random_range(&mut rng, 1, 600);
            let cfg = RetrievalConfig {
                chunk_size,
                min_budget: chunk_size + random_range(&mut rng, 0, 1024),
                lambda: 1.0 + rng.uniform() * 30.0,
                ..RetrievalConfig::default()
            };
            (context, cfg)
        })
        .collect();
    cases.sort_by_key(|(c, _)| c.len());
    for (context, cfg) in &cases {
        let query: Vec<Token> = context.iter().take(3).copied().collect();
        let outcome = (|| -> Result<(), String> {
            let chunks = chunk_context(context, cfg).map_err(|e| e.to_string())?;
            let joined: Vec<Token> = chunks.iter().flat_map(|c| c.tokens.iter().copied()).collect();
            if &joined != context {
                return Err("chunk concatenation differs from the context".into());
            }
            let r = retrieve(&query, context, cfg).map_err(|e| e.to_string())?;
            if let Some(s) = r.trace.iter().find(|s| s.selected && s.score < cfg.sim_threshold) {
                return Err(format!("chunk at {} selected with score {} below threshold", s.chunk_offset, s.score));
            }
            if r.context.len() > r.budget {
                return Err(format!("retrieved {} tokens over budget {}", r.context.len(), r.budget));
            }
            Ok(())
        })();
        suite.check(
            context.len(),
            || format!("context of {} tokens, chunk size {}", context.len(), cfg.chunk_size),
            outcome,
        );
    }
    suite.finish()
}

fn sampling_suite(seed: u64) -> SuiteResult {
    let mut suite = Suite::new(SAMPLING_SUITE);
    let mut rng = RngStream::new(seed);
    let examples: [(&[f64], f64, Token); 4] =
        [(&[0.2, 0.3, 0.5], 0.25, 1), (&[0.2, 0.3, 0.5], 0.0, 0), (&[0.2, 0.3, 0.5], 0.999, 2), (&[0.0, 1.0], 0.0, 1)];
    for (w, u, expected) in examples {
        let outcome = match inverse_cdf(w, u) {
            Ok(t) if t == expected => Ok(()),
            Ok(t) => Err(format!("got token {t}, expected {expected}")),
            Err(e) => Err(e.to_string()),
        };
        suite.check(w.len(), || format!("inverse cdf of {} at u={u}", fmt_vec(w)), outcome);
    }
    for i in 0..60 {
        let n = 2 + i % 16;
        let z = random_logits(&mut rng, n, 20.0);
        let t = [0.5, 1.0, 2.0][i % 3];
        let temp = Temperature::new(t).expect("positive");
        let p = softmax_t(&LogitVector::new(z.clone()).expect("finite"), temp);
        let shifted = softmax_t(&LogitVector::new(z.iter().map(|x| x + 7.5).collect()).expect("finite"), temp);
        let sum: f64 = p.iter().sum();
        let outcome = if (sum - 1.0).abs() > 1e-12 {
            Err(format!("softmax sums to {sum:.15}"))
        } else if total_variation(p.as_slice(), shifted.as_slice()) > 1e-12 {
            Err("softmax is not shift invariant".into())
        } else {
            Ok(())
        };
        suite.check(n, || format!("T={t} z={}", fmt_vec(&z)), outcome);
    }
    for n in [2, 5, 8] {
        let p = random_distribution(&mut rng, n, 1.0);
        let draws = 100_000;
        let mut counts = vec![0u64; n];
        for _ in 0..draws {
            match sample_categorical(&p, &mut rng) {
                Ok(t) => counts[t as usize] += 1,
                Err(_) => break,
            }
        }
        let worst = counts
            .iter()
            .zip(p.iter())
            .map(|(&c, &pi)| (c as f64 / draws as f64 - pi).abs() / (pi * (1.0 - pi) / draws as f64).sqrt())
            .fold(0.0, f64::max);
        let outcome = if worst <= 5.0 { Ok(()) } else { Err(format!("frequency off by {worst:.1} sigma")) };
        suite.check(n, || format!("categorical frequencies for p={}", fmt_vec(p.as_slice())), outcome);
    }
    suite.finish()
}
