//! Language-model backends.
//!
//! A backend maps a token context to a vector of next-token logits. The
//! engine never samples inside a backend: `logits` is a pure function of the
//! context, and all randomness lives in the sampler. The three backends here
//! are small exact-arithmetic stand-ins for the target and drafter models:
//!
//! - [`TableLm`]: explicit lookup table from the last `m` tokens to a distribution.
//! - [`NGramLm`]: add-k smoothed n-gram counts.
//! - [`ContextOracleLm`]: answers a fact when its trigger appears anywhere in
//!   the context, which models needle retrieval from a long document.
//!
//! All three emit log-probabilities as logits, so `softmax(logits / 1)`
//! reproduces the backend's distribution.

mod format;
mod ngram;
mod oracle;
mod table;

pub use format::AnyLm;
pub use ngram::NGramLm;
pub use oracle::{ContextOracleLm, Fact};
pub use table::TableLm;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::json::Sig17;

/// Token id.
pub type Token = u32;

/// Ordered list of token ids.
pub type TokenSeq = Vec<Token>;

/// Logit used for tokens with zero probability. `exp` of it underflows to
/// exactly zero at any temperature below ~13.
pub const LOG_ZERO: f64 = -1.0e4;

/// Tolerance on the ℓ1 mass of a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// A vocabulary of `size` dense token ids `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("vocabulary size must be at least 2, got {size}")));
        }
        if size > Token::MAX as usize {
            return Err(Error::Config(format!("vocabulary size {size} exceeds the token id range")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        (token as usize) < self.size
    }

    /// Fails with [`Error::UnknownToken`] on the first id outside the vocabulary.
    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.contains(t)) {
            Some(&token) => Err(Error::UnknownToken { token, vocab_size: self.size }),
            None => Ok(()),
        }
    }
}

/// Unnormalized, finite next-token scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("logit vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// Log-probabilities of `p`, with zero entries mapped to [`LOG_ZERO`].
    pub fn from_probs(p: &ProbVector) -> Self {
        Self(p.iter().map(|&x| log_prob(x)).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A probability vector over a vocabulary: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {i} is negative ({v})")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self(values))
    }

    /// Normalizes non-negative weights by their sum.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if let Some((i, v)) = weights.iter().enumerate().find(|(_, &v)| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidDistribution(format!("weight {i} is invalid ({v})")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights have no positive mass".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn point_mass(n: usize, token: Token) -> Self {
        let mut v = vec![0.0; n];
        v[token as usize] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, token: Token) -> f64 {
        self.0[token as usize]
    }

    /// Index of the largest entry; the lowest id wins ties.
    pub fn argmax(&self) -> Token {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Serialize for ProbVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&v| Sig17(v)))
    }
}

impl Serialize for LogitVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&v| Sig17(v)))
    }
}

pub(crate) fn log_prob(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        LOG_ZERO
    }
}

pub(crate) fn argmax(values: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as Token
}

/// Any conditional next-token distribution provider.
///
/// Implementations must be deterministic in `ctx` and immutable during
/// inference so one backend can serve many generation streams.
pub trait LmBackend: Send + Sync {
    fn vocab(&self) -> Vocab;

    /// Maximum number of most-recent context tokens the backend looks at.
    fn context_window(&self) -> Option<usize> {
        None
    }

    fn logits(&self, ctx: &[Token]) -> Result<LogitVector>;

    /// Logits at every candidate position in one call:
    /// `result[k] == logits(prefix ++ candidates[..k])`.
    fn logits_batch(&self, prefix: &[Token], candidates: &[Token]) -> Result<Vec<LogitVector>> {
        if candidates.is_empty() {
            return Err(Error::EmptyInput("candidate tokens"));
        }
        let mut ctx = Vec::with_capacity(prefix.len() + candidates.len());
        ctx.extend_from_slice(prefix);
        let mut out = Vec::with_capacity(candidates.len());
        for &c in candidates {
            out.push(self.logits(&ctx)?);
            ctx.push(c);
        }
        Ok(out)
    }
}

impl<B: LmBackend + ?Sized> LmBackend for &B {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }

    fn context_window(&self) -> Option<usize> {
        (**self).context_window()
    }

    fn logits(&self, ctx: &[Token]) -> Result<LogitVector> {
        (**self).logits(ctx)
    }

    fn logits_batch(&self, prefix: &[Token], candidates: &[Token]) -> Result<Vec<LogitVector>> {
        (**self).logits_batch(prefix, candidates)
    }
}

/// Validates `ctx` against `vocab` and keeps only the most recent `window` tokens.
pub(crate) fn visible_context(vocab: Vocab, window: Option<usize>, ctx: &[Token]) -> Result<&[Token]> {
    vocab.check(ctx)?;
    Ok(match window {
        Some(w) if ctx.len() > w => &ctx[ctx.len() - w..],
        _ => ctx,
    })
}

/// The last `order` tokens of `ctx`, or all of it when shorter.
pub(crate) fn window_key(ctx: &[Token], order: usize) -> &[Token] {
    &ctx[ctx.len().saturating_sub(order)..]
}
