use super::{visible_context, LmBackend, LogitVector, ProbVector, Token, Vocab};
use crate::error::{Error, Result};

/// A fact the oracle knows: when `trigger` occurs in the context, the next
/// token is `answer` with probability `confidence`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fact {
    pub trigger: Vec<Token>,
    pub answer: Token,
    pub confidence: f64,
}

impl Fact {
    pub fn new(trigger: Vec<Token>, answer: Token, confidence: f64) -> Result<Self> {
        if trigger.is_empty() {
            return Err(Error::EmptyInput("fact trigger"));
        }
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::Config(format!("fact confidence must be in (0,1), got {confidence}")));
        }
        Ok(Self { trigger, answer, confidence })
    }
}

/// Context-scanning model of needle retrieval.
///
/// The first fact whose trigger appears contiguously anywhere in the visible
/// context fires: its answer gets `confidence` and the remaining mass is
/// spread over the other tokens in proportion to `base`. With no trigger
/// present the model emits `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextOracleLm {
    vocab: Vocab,
    facts: Vec<Fact>,
    base: ProbVector,
    window: Option<usize>,
}

impl ContextOracleLm {
    pub fn new(base: ProbVector) -> Result<Self> {
        let vocab = Vocab::new(base.len())?;
        Ok(Self { vocab, facts: Vec::new(), base, window: None })
    }

    pub fn with_fact(mut self, fact: Fact) -> Result<Self> {
        self.add_fact(fact)?;
        Ok(self)
    }

    pub fn add_fact(&mut self, fact: Fact) -> Result<()> {
        self.vocab.check(&fact.trigger)?;
        self.vocab.check(&[fact.answer])?;
        self.facts.push(fact);
        Ok(())
    }

    pub fn with_context_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn base(&self) -> &ProbVector {
        &self.base
    }

    /// The fact that fires on `ctx`, if any.
    pub fn matching_fact(&self, ctx: &[Token]) -> Result<Option<&Fact>> {
        let ctx = visible_context(self.vocab, self.window, ctx)?;
        Ok(self.facts.iter().find(|f| ctx.windows(f.trigger.len()).any(|w| w == f.trigger.as_slice())))
    }

    pub fn distribution(&self, ctx: &[Token]) -> Result<ProbVector> {
        let Some(fact) = self.matching_fact(ctx)? else {
            return Ok(self.base.clone());
        };
        let n = self.vocab.size();
        let answer = fact.answer as usize;
        let rest: f64 = self.base.iter().enumerate().filter(|&(i, _)| i != answer).map(|(_, &b)| b).sum();
        let remainder = 1.0 - fact.confidence;
        let probs = (0..n)
            .map(|i| {
                if i == answer {
                    fact.confidence
                } else if rest > 0.0 {
                    remainder * self.base[i] / rest
                } else {
                    remainder / (n - 1) as f64
                }
            })
            .collect();
        ProbVector::new(probs)
    }
}

impl LmBackend for ContextOracleLm {
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
