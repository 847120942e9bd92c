use std::collections::BTreeMap;

use super::{visible_context, window_key, LmBackend, LogitVector, ProbVector, Token, Vocab};
use crate::error::{Error, Result};

/// Lookup-table language model over the last `order` tokens.
///
/// The key for a context is its last `min(order, len)` tokens. Contexts whose
/// key has no entry get the fallback distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TableLm {
    vocab: Vocab,
    order: usize,
    table: BTreeMap<Vec<Token>, ProbVector>,
    fallback: ProbVector,
    window: Option<usize>,
}

impl TableLm {
    pub fn new(vocab: Vocab, order: usize, fallback: ProbVector) -> Result<Self> {
        check_len(vocab, &fallback)?;
        Ok(Self { vocab, order, table: BTreeMap::new(), fallback, window: None })
    }

    /// A zero-order table that always predicts `probs`.
    pub fn constant(probs: ProbVector) -> Result<Self> {
        let vocab = Vocab::new(probs.len())?;
        Self::new(vocab, 0, probs)
    }

    pub fn insert(&mut self, key: Vec<Token>, probs: ProbVector) -> Result<()> {
        if key.len() > self.order {
            return Err(Error::Config(format!("table key of length {} exceeds order {}", key.len(), self.order)));
        }
        self.vocab.check(&key)?;
        check_len(self.vocab, &probs)?;
        self.table.insert(key, probs);
        Ok(())
    }

    pub fn with_entry(mut self, key: Vec<Token>, probs: ProbVector) -> Result<Self> {
        self.insert(key, probs)?;
        Ok(self)
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fallback(&self) -> &ProbVector {
        &self.fallback
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<Token>, &ProbVector)> {
        self.table.iter()
    }

    pub fn distribution(&self, ctx: &[Token]) -> Result<&ProbVector> {
        let ctx = visible_context(self.vocab, self.window, ctx)?;
        Ok(self.table.get(window_key(ctx, self.order)).unwrap_or(&self.fallback))
    }
}

impl LmBackend for TableLm {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn context_window(&self) -> Option<usize> {
        self.window
    }

    fn logits(&self, ctx: &[Token]) -> Result<LogitVector> {
        Ok(LogitVector::from_probs(self.distribution(ctx)?))
    }
}

pub(super) fn check_len(vocab: Vocab, p: &ProbVector) -> Result<()> {
    if p.len() != vocab.size() {
        return Err(Error::DimensionMismatch { expected: vocab.size(), got: p.len() });
    }
    Ok(())
}
