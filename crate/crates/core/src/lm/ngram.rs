use std::collections::BTreeMap;

use super::{visible_context, window_key, LmBackend, LogitVector, ProbVector, Token, Vocab};
use crate::error::{Error, Result};

/// Add-k smoothed n-gram model: `P(t | w) = (count(w, t) + k) / (total(w) + k·|V|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    vocab: Vocab,
    order: usize,
    smoothing: f64,
    counts: BTreeMap<Vec<Token>, Vec<u64>>,
    window: Option<usize>,
}

impl NGramLm {
    pub fn new(vocab: Vocab, order: usize, smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!("smoothing must be positive, got {smoothing}")));
        }
        Ok(Self { vocab, order, smoothing, counts: BTreeMap::new(), window: None })
    }

    /// Counts every (window, next token) pair in `docs`. Windows near the start
    /// of a document are shorter than `order`, matching how contexts are keyed.
    pub fn fit(vocab: Vocab, order: usize, smoothing: f64, docs: &[Vec<Token>]) -> Result<Self> {
        let mut lm = Self::new(vocab, order, smoothing)?;
        for doc in docs {
            vocab.check(doc)?;
            for i in 0..doc.len() {
                let key = window_key(&doc[..i], order).to_vec();
                let row = lm.counts.entry(key).or_insert_with(|| vec![0; vocab.size()]);
                row[doc[i] as usize] += 1;
            }
        }
        Ok(lm)
    }

    pub fn set_counts(&mut self, key: Vec<Token>, counts: Vec<u64>) -> Result<()> {
        if key.len() > self.order {
            return Err(Error::Config(format!("n-gram key of length {} exceeds order {}", key.len(), self.order)));
        }
        self.vocab.check(&key)?;
        if counts.len() != self.vocab.size() {
            return Err(Error::DimensionMismatch { expected: self.vocab.size(), got: counts.len() });
        }
        self.counts.insert(key, counts);
        Ok(())
    }

    pub fn with_counts(mut self, key: Vec<Token>, counts: Vec<u64>) -> Result<Self> {
        self.set_counts(key, counts)?;
        Ok(self)
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.smoothing
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<Token>, &Vec<u64>)> {
        self.counts.iter()
    }

    pub fn distribution(&self, ctx: &[Token]) -> Result<ProbVector> {
        let ctx = visible_context(self.vocab, self.window, ctx)?;
        let n = self.vocab.size();
        let k = self.smoothing;
        let probs = match self.counts.get(window_key(ctx, self.order)) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = total as f64 + k * n as f64;
                row.iter().map(|&c| (c as f64 + k) / denom).collect()
            }
            None => vec![1.0 / n as f64; n],
        };
        ProbVector::new(probs)
    }
}

impl LmBackend for NGramLm {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn context_window(&self) -> Option<usize> {
        self.window
    }

    fn logits(&self, ctx: &[Token]) -> Result<LogitVector> {
        Ok(LogitVector::from_probs(&self.distribution(ctx)?))
    }
}
