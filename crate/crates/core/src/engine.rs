//! The retrieval-augmented speculative decoding loop.
//!
//! Each step the drafter, conditioned on the retrieved context, samples up to
//! `gamma` tokens. The target scores every drafted position in one batch. At
//! each position the target logits are pulled toward the drafter:
//!
//! ```text
//! p      = softmax(z / T)
//! ẑ      = z + ηT(q − p)          one distillation step with the drafter as teacher
//! p̂_raw  = softmax(ẑ / T)
//! p̂      = tail_preserve(p, p̂_raw, α)
//! ```
//!
//! A drafted token `x` is accepted when `r ≤ min(1, p̂(x)/q(x))`. The first
//! rejection ends the step and a replacement is drawn from
//! `norm(max(p − p̂, p − q, 0))`.
//!
//! With `η = 0` this is exactly classical speculative sampling.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::json::{sig17, sig17_vec};
use crate::lm::{LmBackend, LogitVector, ProbVector, Token, TokenSeq};
use crate::sampling::{inverse_cdf, norm_clamped, sample_categorical, softmax_t, RngStream, Temperature};

/// Transfer strengths swept by default: the self-speculation range plus the
/// larger values used when the drafter is the stronger model.
pub const ETA_GRID: [f64; 6] = [0.0, 5.0, 10.0, 20.0, 40.0, 50.0];

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Speculative tokens per step.
    pub gamma: usize,
    /// Knowledge-transfer strength.
    pub eta: f64,
    pub temperature: Temperature,
    /// Entries of `p̂_raw` below `tail_factor · max(p̂_raw)` are reset to the target's value.
    pub tail_factor: f64,
    /// Number of tokens to generate.
    pub max_tokens: usize,
    pub seed: u64,
    /// Sample one extra target token when a whole block is accepted.
    pub bonus_token: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            gamma: 10,
            eta: 0.0,
            temperature: Temperature::ONE,
            tail_factor: 0.1,
            max_tokens: 64,
            seed: 0,
            bonus_token: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be at least 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be a finite non-negative number, got {}", self.eta)));
        }
        if !(self.tail_factor > 0.0 && self.tail_factor < 1.0) {
            return Err(Error::Config(format!("tail_factor must be in (0,1), got {}", self.tail_factor)));
        }
        Ok(())
    }
}

/// Samples `gamma` tokens from the drafter on `[retrieved; prefix; drafted_<k]`
/// and returns them with the drafter's full distribution at each position.
pub fn draft_block(
    drafter: &dyn LmBackend,
    retrieved: &[Token],
    prefix: &[Token],
    gamma: usize,
    t: Temperature,
    rng: &mut RngStream,
) -> Result<(TokenSeq, Vec<ProbVector>)> {
    if gamma == 0 {
        return Err(Error::Config("gamma must be at least 1".into()));
    }
    let mut ctx = Vec::with_capacity(retrieved.len() + prefix.len() + gamma);
    ctx.extend_from_slice(retrieved);
    ctx.extend_from_slice(prefix);
    let mut tokens = Vec::with_capacity(gamma);
    let mut probs = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let q = softmax_t(&drafter.logits(&ctx)?, t);
        let x = sample_categorical(&q, rng)?;
        ctx.push(x);
        tokens.push(x);
        probs.push(q);
    }
    Ok((tokens, probs))
}

/// `ẑ = z + ηT(q − p)`.
pub fn augment_logits(
    z: &LogitVector,
    p: &ProbVector,
    q: &ProbVector,
    eta: f64,
    t: Temperature,
) -> Result<LogitVector> {
    if p.len() != z.len() || q.len() != z.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: if p.len() != z.len() { p.len() } else { q.len() },
        });
    }
    let scale = eta * t.get();
    LogitVector::new(
        z.as_slice().iter().zip(q.iter().zip(p.iter())).map(|(zi, (qi, pi))| zi + scale * (qi - pi)).collect(),
    )
}

/// Tail substitution without renormalization: every entry of `p_hat_raw`
/// below `alpha · max(p_hat_raw)` takes the value of `p`.
pub fn tail_substitute(p: &[f64], p_hat_raw: &[f64], alpha: f64) -> Vec<f64> {
    let threshold = alpha * p_hat_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    p_hat_raw.iter().zip(p).map(|(&h, &w)| if h < threshold { w } else { h }).collect()
}

/// [`tail_substitute`], then ℓ1-renormalized. Returns `p_hat_raw` untouched
/// when no entry falls below the threshold.
pub fn tail_preserve(p: &ProbVector, p_hat_raw: &ProbVector, alpha: f64) -> Result<ProbVector> {
    if p.len() != p_hat_raw.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: p_hat_raw.len() });
    }
    let threshold = alpha * p_hat_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if p_hat_raw.iter().all(|&h| h >= threshold) {
        return Ok(p_hat_raw.clone());
    }
    ProbVector::from_weights(&tail_substitute(p.as_slice(), p_hat_raw.as_slice(), alpha))
}

/// The three distributions the acceptance test needs at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTarget {
    /// Target distribution `softmax(z/T)`.
    pub p: ProbVector,
    /// `softmax(ẑ/T)` before tail preservation.
    pub p_hat_raw: ProbVector,
    /// Distribution used in the acceptance test.
    pub p_hat: ProbVector,
}

pub fn augmented_target(
    z: &LogitVector,
    q: &ProbVector,
    eta: f64,
    t: Temperature,
    alpha: f64,
) -> Result<AugmentedTarget> {
    let p = softmax_t(z, t);
    let z_hat = augment_logits(z, &p, q, eta, t)?;
    let p_hat_raw = softmax_t(&z_hat, t);
    let p_hat = tail_preserve(&p, &p_hat_raw, alpha)?;
    Ok(AugmentedTarget { p, p_hat_raw, p_hat })
}

/// `max(p − p̂, p − q, 0)` normalized, i.e. `norm(max(p − min(p̂, q), 0))`.
/// Falls back to `p` when nothing is left after clamping.
pub fn residual_distribution(p: &ProbVector, p_hat: &ProbVector, q: &ProbVector) -> Result<ProbVector> {
    let raw: Vec<f64> = (0..p.len()).map(|i| (p[i] - p_hat[i]).max(p[i] - q[i])).collect();
    match norm_clamped(&raw) {
        Err(Error::DegenerateResidual) => Ok(p.clone()),
        other => other,
    }
}

/// Draws the replacement token after a rejection.
pub fn residual_sample(p: &ProbVector, p_hat: &ProbVector, q: &ProbVector, rng: &mut RngStream) -> Result<Token> {
    check_same_len(p, p_hat)?;
    check_same_len(p, q)?;
    sample_categorical(&residual_distribution(p, p_hat, q)?, rng)
}

fn check_same_len(a: &ProbVector, b: &ProbVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    Ok(())
}

/// Result of testing one drafted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted(Token),
    /// The drafted token was rejected; `correction` came from the residual.
    Rejected {
        drafted: Token,
        correction: Token,
    },
}

impl Verdict {
    /// The token emitted at this position.
    pub fn token(self) -> Token {
        match self {
            Verdict::Accepted(t) => t,
            Verdict::Rejected { correction, .. } => correction,
        }
    }

    pub fn accepted(self) -> bool {
        matches!(self, Verdict::Accepted(_))
    }
}

/// Accept/resample rule at a single position, with the residual precomputed.
///
/// The engine and the Monte Carlo oracle both go through this type, so the
/// oracle exercises the same code that generation runs.
#[derive(Debug, Clone)]
pub struct PositionKernel {
    pub p: ProbVector,
    pub p_hat: ProbVector,
    pub q: ProbVector,
    residual: ProbVector,
}

impl PositionKernel {
    pub fn new(p: ProbVector, p_hat: ProbVector, q: ProbVector) -> Result<Self> {
        check_same_len(&p, &p_hat)?;
        check_same_len(&p, &q)?;
        let residual = residual_distribution(&p, &p_hat, &q)?;
        Ok(Self { p, p_hat, q, residual })
    }

    pub fn residual(&self) -> &ProbVector {
        &self.residual
    }

    /// Acceptance threshold `min(1, p̂(x)/q(x))`.
    pub fn acceptance_ratio(&self, drafted: Token) -> Result<f64> {
        let qx = self.q.get(drafted);
        if !(qx > 0.0) {
            return Err(Error::Invariant(format!("drafted token {drafted} has zero draft probability")));
        }
        Ok((self.p_hat.get(drafted) / qx).min(1.0))
    }

    /// Tests `drafted` against the uniform draw `r`; on rejection consumes one
    /// more uniform from `rng` for the residual sample.
    pub fn judge(&self, drafted: Token, r: f64, rng: &mut RngStream) -> Result<Verdict> {
        if r <= self.acceptance_ratio(drafted)? {
            Ok(Verdict::Accepted(drafted))
        } else {
            let correction = inverse_cdf(self.residual.as_slice(), rng.uniform())?;
            Ok(Verdict::Rejected { drafted, correction })
        }
    }

    /// One full trial: draft from `q`, draw `r`, judge.
    pub fn trial(&self, rng: &mut RngStream) -> Result<Verdict> {
        let drafted = sample_categorical(&self.q, rng)?;
        let r = rng.uniform();
        self.judge(drafted, r, rng)
    }
}

/// Audit record of one draft-and-verify step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepTrace {
    pub drafted: TokenSeq,
    pub draft_probs: Vec<ProbVector>,
    pub accepted_count: usize,
    /// Present iff `accepted_count < drafted.len()`.
    pub correction_token: Option<Token>,
    /// Extra target sample after a fully accepted block (only with `bonus_token`).
    pub bonus_token: Option<Token>,
    /// Distributions at the rejected position.
    pub p_vec: Option<ProbVector>,
    pub p_hat_vec: Option<ProbVector>,
    pub q_vec: Option<ProbVector>,
    #[serde(serialize_with = "sig17_vec")]
    pub acceptance_randoms: Vec<f64>,
}

impl StepTrace {
    /// Tokens this step appends to the output.
    pub fn emitted(&self) -> impl Iterator<Item = Token> + '_ {
        self.drafted[..self.accepted_count].iter().copied().chain(self.correction_token).chain(self.bonus_token)
    }
}

/// Verifies `drafted` against the target on `[context; prefix; drafted_<j]`.
#[allow(clippy::too_many_arguments)]
pub fn verify_block(
    target: &dyn LmBackend,
    context: &[Token],
    prefix: &[Token],
    drafted: &[Token],
    draft_probs: &[ProbVector],
    cfg: &EngineConfig,
    rng: &mut RngStream,
) -> Result<StepTrace> {
    verify_block_inner(target, context, prefix, drafted, draft_probs, cfg, cfg.bonus_token, rng)
}

#[allow(clippy::too_many_arguments)]
fn verify_block_inner(
    target: &dyn LmBackend,
    context: &[Token],
    prefix: &[Token],
    drafted: &[Token],
    draft_probs: &[ProbVector],
    cfg: &EngineConfig,
    allow_bonus: bool,
    rng: &mut RngStream,
) -> Result<StepTrace> {
    if drafted.is_empty() {
        return Err(Error::EmptyInput("drafted tokens"));
    }
    if drafted.len() != draft_probs.len() {
        return Err(Error::DimensionMismatch { expected: drafted.len(), got: draft_probs.len() });
    }
    let mut full = Vec::with_capacity(context.len() + prefix.len() + drafted.len());
    full.extend_from_slice(context);
    full.extend_from_slice(prefix);
    let logits = target.logits_batch(&full, drafted)?;

    let mut trace = StepTrace {
        drafted: drafted.to_vec(),
        draft_probs: draft_probs.to_vec(),
        accepted_count: 0,
        correction_token: None,
        bonus_token: None,
        p_vec: None,
        p_hat_vec: None,
        q_vec: None,
        acceptance_randoms: Vec::with_capacity(drafted.len()),
    };
    for (j, (z, q)) in logits.iter().zip(draft_probs).enumerate() {
        let aug = augmented_target(z, q, cfg.eta, cfg.temperature, cfg.tail_factor)?;
        let kernel = PositionKernel::new(aug.p, aug.p_hat, q.clone())?;
        let r = rng.uniform();
        trace.acceptance_randoms.push(r);
        match kernel.judge(drafted[j], r, rng)? {
            Verdict::Accepted(_) => trace.accepted_count += 1,
            Verdict::Rejected { correction, .. } => {
                trace.correction_token = Some(correction);
                trace.p_vec = Some(kernel.p);
                trace.p_hat_vec = Some(kernel.p_hat);
                trace.q_vec = Some(kernel.q);
                return Ok(trace);
            }
        }
    }
    if allow_bonus {
        full.extend_from_slice(drafted);
        let p = softmax_t(&target.logits(&full)?, cfg.temperature);
        trace.bonus_token = Some(sample_categorical(&p, rng)?);
    }
    Ok(trace)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationStats {
    pub total_drafted: usize,
    pub total_accepted: usize,
    pub steps: usize,
    #[serde(serialize_with = "sig17")]
    pub acceptance_rate: f64,
    pub tokens_emitted: usize,
    pub bonus_tokens: usize,
}

impl GenerationStats {
    pub fn from_traces(traces: &[StepTrace]) -> Self {
        let total_drafted: usize = traces.iter().map(|t| t.drafted.len()).sum();
        let total_accepted: usize = traces.iter().map(|t| t.accepted_count).sum();
        let acceptance_rate = if total_drafted == 0 { 0.0 } else { total_accepted as f64 / total_drafted as f64 };
        Self {
            total_drafted,
            total_accepted,
            steps: traces.len(),
            acceptance_rate,
            tokens_emitted: traces.iter().map(|t| t.emitted().count()).sum(),
            bonus_tokens: traces.iter().filter(|t| t.bonus_token.is_some()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: TokenSeq,
    pub stats: GenerationStats,
    pub traces: Vec<StepTrace>,
}

/// Runs the full loop until `cfg.max_tokens` tokens are emitted.
///
/// The target sees `[context; query_prefix; generated]` and the drafter sees
/// `[retrieved; query_prefix; generated]`. The last block is shortened so the
/// output never exceeds `max_tokens`.
pub fn generate(
    target: &dyn LmBackend,
    drafter: &dyn LmBackend,
    context: &[Token],
    retrieved: &[Token],
    query_prefix: &[Token],
    cfg: &EngineConfig,
) -> Result<Generation> {
    cfg.validate()?;
    if target.vocab() != drafter.vocab() {
        return Err(Error::VocabMismatch { expected: target.vocab().size(), got: drafter.vocab().size() });
    }
    let mut rng = RngStream::new(cfg.seed);
    let mut committed: TokenSeq = query_prefix.to_vec();
    let start = committed.len();
    let mut traces = Vec::new();
    while committed.len() - start < cfg.max_tokens {
        let remaining = cfg.max_tokens - (committed.len() - start);
        let gamma = cfg.gamma.min(remaining);
        let (drafted, probs) = draft_block(drafter, retrieved, &committed, gamma, cfg.temperature, &mut rng)?;
        let allow_bonus = cfg.bonus_token && remaining > gamma;
        let trace = verify_block_inner(target, context, &committed, &drafted, &probs, cfg, allow_bonus, &mut rng)?;
        committed.extend(trace.emitted());
        traces.push(trace);
    }
    let tokens = committed.split_off(start);
    let stats = GenerationStats::from_traces(&traces);
    Ok(Generation { tokens, stats, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{TableLm, Vocab};
    use crate::sampling::total_variation;
    use proptest::prelude::*;
    use std::sync::Mutex;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn lv(v: &[f64]) -> LogitVector {
        LogitVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn augment_examples() {
        let z = lv(&[0.0, 0.0]);
        let p = pv(&[0.5, 0.5]);
        let q = pv(&[0.9, 0.1]);
        let zh = augment_logits(&z, &p, &q, 2.0, Temperature::ONE).unwrap();
        assert!((zh.as_slice()[0] - 0.8).abs() < 1e-15 && (zh.as_slice()[1] + 0.8).abs() < 1e-15);
        assert_eq!(augment_logits(&z, &p, &q, 0.0, Temperature::ONE).unwrap(), z);
        assert_eq!(augment_logits(&z, &p, &p, 37.0, Temperature::ONE).unwrap(), z);
    }

    #[test]
    fn tail_preserve_examples() {
        let out = tail_preserve(&pv(&[0.4, 0.3, 0.3]), &pv(&[0.70, 0.25, 0.05]), 0.1).unwrap();
        for (a, b) in out.iter().zip([0.56, 0.20, 0.24]) {
            assert!((a - b).abs() < 1e-12, "{out:?}");
        }
        let raw = pv(&[0.5, 0.3, 0.2]);
        assert_eq!(tail_preserve(&pv(&[0.1, 0.1, 0.8]), &raw, 0.1).unwrap(), raw);
        let p = pv(&[0.97, 0.02, 0.01]);
        let out = tail_preserve(&p, &p, 0.1).unwrap();
        assert!(total_variation(out.as_slice(), p.as_slice()) < 1e-15);
    }

    #[test]
    fn residual_examples() {
        let p = pv(&[0.5, 0.3, 0.2]);
        let p_hat = pv(&[0.6, 0.3, 0.1]);
        let q = pv(&[0.2, 0.5, 0.3]);
        let r = residual_distribution(&p, &p_hat, &q).unwrap();
        for (a, b) in r.iter().zip([0.75, 0.0, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        // p̂ = p and p̂ = q both reduce to the classical residual.
        let classical = norm_clamped(&[0.3, -0.2, -0.1]).unwrap();
        assert_eq!(residual_distribution(&p, &p, &q).unwrap(), classical);
        assert_eq!(residual_distribution(&p, &q, &q).unwrap(), classical);
        // Nothing left after clamping: fall back to p.
        assert_eq!(residual_distribution(&p, &p, &p).unwrap(), p);
    }

    #[test]
    fn zero_draft_probability_is_an_invariant_breach() {
        let k = PositionKernel::new(pv(&[0.5, 0.5]), pv(&[0.5, 0.5]), pv(&[1.0, 0.0])).unwrap();
        assert!(matches!(k.acceptance_ratio(1), Err(Error::Invariant(_))));
    }

    #[test]
    fn identical_distributions_always_accept() {
        let p = pv(&[0.2, 0.3, 0.5]);
        let k = PositionKernel::new(p.clone(), p.clone(), p).unwrap();
        let mut rng = RngStream::new(1);
        assert!((0..10_000).all(|_| k.trial(&mut rng).unwrap().accepted()));
    }

    #[test]
    fn zero_target_mass_always_rejects() {
        let k = PositionKernel::new(pv(&[0.0, 1.0]), pv(&[0.0, 1.0]), pv(&[0.5, 0.5])).unwrap();
        let mut rng = RngStream::new(2);
        for _ in 0..10_000 {
            let r = rng.uniform();
            assert_eq!(k.judge(0, r, &mut rng).unwrap(), Verdict::Rejected { drafted: 0, correction: 1 });
        }
    }

    #[test]
    fn single_position_acceptance_rate() {
        // Σ min(q, p̂) = 0.2 + 0.3 + 0.1 = 0.6.
        let k = PositionKernel::new(pv(&[0.5, 0.3, 0.2]), pv(&[0.6, 0.3, 0.1]), pv(&[0.2, 0.5, 0.3])).unwrap();
        let n = 1_000_000;
        let mut rng = RngStream::new(77);
        let accepted = (0..n).filter(|_| k.trial(&mut rng).unwrap().accepted()).count();
        let sigma = (0.6f64 * 0.4 / n as f64).sqrt();
        assert!((accepted as f64 / n as f64 - 0.6).abs() <= 3.0 * sigma);
    }

    #[test]
    fn point_mass_drafter() {
        let drafter = TableLm::constant(ProbVector::point_mass(8, 5)).unwrap();
        let mut rng = RngStream::new(3);
        let (toks, probs) = draft_block(&drafter, &[1, 2], &[3], 4, Temperature::ONE, &mut rng).unwrap();
        assert_eq!(toks, vec![5; 4]);
        assert!(probs.iter().all(|p| *p == ProbVector::point_mass(8, 5)));
    }

    #[test]
    fn single_draft_replays_rng() {
        let drafter = TableLm::constant(ProbVector::uniform(4)).unwrap();
        let mut rng = RngStream::new(11);
        let (toks, _) = draft_block(&drafter, &[], &[], 1, Temperature::ONE, &mut rng).unwrap();
        let u = RngStream::new(11).uniform();
        assert_eq!(toks[0], inverse_cdf(&[0.25; 4], u).unwrap());
        assert_eq!(toks[0], (u * 4.0) as Token);
    }

    fn bigram_pair() -> (TableLm, TableLm) {
        let v = Vocab::new(4).unwrap();
        let target = TableLm::new(v, 1, pv(&[0.25, 0.25, 0.25, 0.25]))
            .unwrap()
            .with_entry(vec![0], pv(&[0.1, 0.6, 0.2, 0.1]))
            .unwrap()
            .with_entry(vec![1], pv(&[0.3, 0.1, 0.5, 0.1]))
            .unwrap()
            .with_entry(vec![2], pv(&[0.4, 0.4, 0.1, 0.1]))
            .unwrap();
        let drafter = TableLm::new(v, 1, pv(&[0.1, 0.2, 0.3, 0.4]))
            .unwrap()
            .with_entry(vec![0], pv(&[0.2, 0.5, 0.2, 0.1]))
            .unwrap()
            .with_entry(vec![3], pv(&[0.7, 0.1, 0.1, 0.1]))
            .unwrap();
        (target, drafter)
    }

    #[test]
    fn self_speculation_accepts_everything() {
        let (target, _) = bigram_pair();
        let ctx = vec![0, 1, 2, 3, 0];
        let cfg = EngineConfig { max_tokens: 200, seed: 5, ..EngineConfig::default() };
        let g = generate(&target, &target, &ctx, &ctx, &[0], &cfg).unwrap();
        assert_eq!(g.stats.acceptance_rate, 1.0);
        assert_eq!(g.tokens.len(), 200);
        assert!(g.traces.iter().all(|t| t.correction_token.is_none()));
    }

    #[test]
    fn point_mass_target_dictates_output() {
        let target = TableLm::constant(ProbVector::point_mass(4, 2)).unwrap();
        let (_, drafter) = bigram_pair();
        for eta in [0.0, 5.0, 50.0] {
            let cfg = EngineConfig { max_tokens: 37, eta, seed: 9, ..EngineConfig::default() };
            let g = generate(&target, &drafter, &[1, 1], &[1], &[], &cfg).unwrap();
            assert_eq!(g.tokens, vec![2; 37], "eta={eta}");
        }
    }

    #[test]
    fn stats_are_consistent_with_traces() {
        let (target, drafter) = bigram_pair();
        for bonus in [false, true] {
            let cfg =
                EngineConfig { gamma: 3, eta: 5.0, max_tokens: 101, seed: 1, bonus_token: bonus, ..Default::default() };
            let g = generate(&target, &drafter, &[0, 1], &[0], &[2], &cfg).unwrap();
            let s = &g.stats;
            assert_eq!(g.tokens.len(), 101);
            assert_eq!(s.tokens_emitted, 101);
            assert_eq!(s.total_accepted, g.traces.iter().map(|t| t.accepted_count).sum::<usize>());
            assert_eq!(
                s.tokens_emitted,
                g.traces
                    .iter()
                    .map(|t| t.accepted_count
                        + t.correction_token.is_some() as usize
                        + t.bonus_token.is_some() as usize)
                    .sum::<usize>()
            );
            assert_eq!(g.tokens, g.traces.iter().flat_map(|t| t.emitted().collect::<Vec<_>>()).collect::<Vec<_>>());
            for t in &g.traces {
                assert!(t.accepted_count <= t.drafted.len());
                assert_eq!(t.correction_token.is_some(), t.accepted_count < t.drafted.len());
                assert_eq!(t.acceptance_randoms.len(), t.accepted_count + t.correction_token.is_some() as usize);
            }
            assert!((0.0..=1.0).contains(&s.acceptance_rate));
            if !bonus {
                assert_eq!(s.bonus_tokens, 0);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (target, drafter) = bigram_pair();
        let cfg = EngineConfig { eta: 10.0, max_tokens: 64, seed: 99, ..Default::default() };
        let a = generate(&target, &drafter, &[0], &[], &[1], &cfg).unwrap();
        let b = generate(&target, &drafter, &[0], &[], &[1], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_mismatch_is_a_config_error() {
        let a = TableLm::constant(ProbVector::uniform(3)).unwrap();
        let b = TableLm::constant(ProbVector::uniform(4)).unwrap();
        assert!(matches!(generate(&a, &b, &[], &[], &[], &EngineConfig::default()), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        assert!(EngineConfig { gamma: 0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { eta: -1.0, ..Default::default() }.validate().is_err());
        assert!(EngineConfig { tail_factor: 1.0, ..Default::default() }.validate().is_err());
    }

    /// Records every context the target is asked about.
    struct Recording<'a> {
        inner: &'a TableLm,
        seen: Mutex<Vec<Vec<Token>>>,
    }

    impl LmBackend for Recording<'_> {
        fn vocab(&self) -> Vocab {
            self.inner.vocab()
        }

        fn logits(&self, ctx: &[Token]) -> Result<LogitVector> {
            self.seen.lock().unwrap().push(ctx.to_vec());
            self.inner.logits(ctx)
        }
    }

    #[test]
    fn target_conditions_on_context_and_committed_prefix() {
        let (target, drafter) = bigram_pair();
        let rec = Recording { inner: &target, seen: Mutex::new(Vec::new()) };
        let context = vec![3, 3, 3];
        let query = vec![0];
        let cfg = EngineConfig { gamma: 4, eta: 5.0, max_tokens: 30, seed: 4, ..Default::default() };
        let g = generate(&rec, &drafter, &context, &[1], &query, &cfg).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        let mut i = 0;
        let mut committed = query.clone();
        for t in &g.traces {
            for j in 0..t.drafted.len().min(t.accepted_count + 1) {
                let mut expect = context.clone();
                expect.extend(&committed);
                expect.extend(&t.drafted[..j]);
                assert_eq!(seen[i + j], expect);
            }
            i += t.drafted.len();
            committed.extend(t.emitted());
        }
        assert_eq!(i, seen.len());
    }

    proptest! {
        #[test]
        fn eta_zero_leaves_target_untouched(z in prop::collection::vec(-6.0f64..6.0, 2..9), seed in any::<u64>(), t in 0.3f64..3.0) {
            let mut rng = RngStream::new(seed);
            let w: Vec<f64> = (0..z.len()).map(|_| rng.uniform() + 1e-6).collect();
            let q = ProbVector::from_weights(&w).unwrap();
            let aug = augmented_target(&lv(&z), &q, 0.0, Temperature::new(t).unwrap(), 0.1).unwrap();
            prop_assert_eq!(&aug.p_hat_raw, &aug.p);
            prop_assert!(total_variation(aug.p_hat.as_slice(), aug.p.as_slice()) <= 1e-15);
        }

        #[test]
        fn draft_probs_match_recomputation(seed in any::<u64>(), gamma in 1usize..6, t in 0.5f64..2.0) {
            let (_, drafter) = bigram_pair();
            let t = Temperature::new(t).unwrap();
            let mut rng = RngStream::new(seed);
            let (toks, probs) = draft_block(&drafter, &[2, 3], &[0], gamma, t, &mut rng).unwrap();
            let mut ctx = vec![2, 3, 0];
            for (x, q) in toks.iter().zip(&probs) {
                prop_assert_eq!(q, &softmax_t(&drafter.logits(&ctx).unwrap(), t));
                ctx.push(*x);
            }
        }

        #[test]
        fn tail_preserve_contract(raw in prop::collection::vec(0.0f64..1.0, 2..9), seed in any::<u64>(), alpha in 0.01f64..0.99) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let raw = ProbVector::from_weights(&raw).unwrap();
            let mut rng = RngStream::new(seed);
            let w: Vec<f64> = (0..raw.len()).map(|_| rng.uniform() + 1e-6).collect();
            let p = ProbVector::from_weights(&w).unwrap();
            let sub = tail_substitute(p.as_slice(), raw.as_slice(), alpha);
            let max = raw.iter().copied().fold(0.0, f64::max);
            for i in 0..raw.len() {
                if raw[i] < alpha * max { prop_assert_eq!(sub[i], p[i]); } else { prop_assert_eq!(sub[i], raw[i]); }
            }
            let out = tail_preserve(&p, &raw, alpha).unwrap();
            prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
