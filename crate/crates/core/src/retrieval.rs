//! Builds the compressed drafter context from a long context.
//!
//! The long context is cut into fixed-size chunks, every chunk and the query
//! are embedded, and chunks are picked greedily by cosine similarity to the
//! query. Chunks below the similarity threshold are dropped, the picked
//! chunks never exceed the retrieval budget, and they are glued back together
//! in document order.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lm::{Token, TokenSeq};

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    /// Tokens per chunk.
    pub chunk_size: usize,
    /// Minimum cosine similarity for a chunk to be eligible.
    pub sim_threshold: f64,
    /// Lower bound on the retrieval budget, in tokens.
    pub min_budget: usize,
    /// Compression divisor: the budget is `|C| / lambda` when that exceeds `min_budget`.
    pub lambda: f64,
    /// Embedding dimension of the default hashed embedder.
    pub embed_dim: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { chunk_size: 512, sim_threshold: 0.3, min_budget: 4096, lambda: 24.0, embed_dim: 64 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if self.min_budget < self.chunk_size {
            return Err(Error::Config(format!(
                "min_budget ({}) must be at least chunk_size ({})",
                self.min_budget, self.chunk_size
            )));
        }
        if !(self.lambda > 1.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must exceed 1, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            return Err(Error::Config(format!("sim_threshold must be in [0,1], got {}", self.sim_threshold)));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// A contiguous slice of the long context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub tokens: TokenSeq,
    /// Offset of the first token in the long context.
    pub start_offset: usize,
}

/// Splits `context` into `chunk_size` pieces; only the last may be shorter.
pub fn chunk_context(context: &[Token], cfg: &RetrievalConfig) -> Result<Vec<Chunk>> {
    if context.is_empty() {
        return Err(Error::EmptyInput("context"));
    }
    if cfg.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    Ok(context
        .chunks(cfg.chunk_size)
        .enumerate()
        .map(|(i, c)| Chunk { tokens: c.to_vec(), start_offset: i * cfg.chunk_size })
        .collect())
}

/// Unit-norm embedding, or the zero vector for empty input.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

/// Maps a token sequence into a vector space where cosine similarity is meaningful.
pub trait Embedder: Sync {
    fn embed(&self, tokens: &[Token]) -> EmbeddingVector;
}

/// Hashed bag-of-tokens embedder.
///
/// Each token id lands in bucket `(id · 0x9E3779B97F4A7C15 >> 32) mod dim`;
/// bucket counts are L2-normalized. Token order is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagEmbedder {
    dim: usize,
}

impl HashedBagEmbedder {
    const MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: Token) -> usize {
        (((token as u64).wrapping_add(1).wrapping_mul(Self::MULTIPLIER) >> 32) % self.dim as u64) as usize
    }
}

impl Embedder for HashedBagEmbedder {
    fn embed(&self, tokens: &[Token]) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        for &t in tokens {
            v[self.bucket(t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector(v)
    }
}

/// Embeds with the default hashed embedder of dimension `cfg.embed_dim`.
pub fn embed(tokens: &[Token], cfg: &RetrievalConfig) -> EmbeddingVector {
    HashedBagEmbedder::new(cfg.embed_dim).embed(tokens)
}

/// Cosine similarity; `0` when either side is the zero vector.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let na = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.0.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `max(min_budget, floor(context_len / lambda))`.
///
/// When `context_len / lambda` falls below `min_budget` the lower bound wins.
pub fn retrieval_budget(context_len: usize, cfg: &RetrievalConfig) -> usize {
    let scaled = (context_len as f64 / cfg.lambda).floor() as usize;
    scaled.max(cfg.min_budget)
}

/// Score and selection status of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScore {
    pub chunk_offset: usize,
    pub len: usize,
    pub score: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Selected chunks concatenated in document order.
    pub context: TokenSeq,
    /// One entry per chunk, in document order.
    pub trace: Vec<ChunkScore>,
    pub budget: usize,
}

impl Retrieval {
    /// CSV with header `chunk_offset,score,selected`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("chunk_offset,score,selected\n");
        for c in &self.trace {
            let _ = writeln!(out, "{},{:.16e},{}", c.chunk_offset, c.score, c.selected);
        }
        out
    }
}

/// Builds the retrieval context with the default embedder.
pub fn select_chunks(query: &[Token], context: &[Token], cfg: &RetrievalConfig) -> Result<TokenSeq> {
    Ok(retrieve(query, context, cfg)?.context)
}

pub fn retrieve(query: &[Token], context: &[Token], cfg: &RetrievalConfig) -> Result<Retrieval> {
    cfg.validate()?;
    retrieve_with(&HashedBagEmbedder::new(cfg.embed_dim), query, context, cfg)
}

/// Greedy selection by descending score (ties go to the earlier chunk). A
/// chunk that would overflow the budget is skipped and scanning continues.
pub fn retrieve_with(
    embedder: &dyn Embedder,
    query: &[Token],
    context: &[Token],
    cfg: &RetrievalConfig,
) -> Result<Retrieval> {
    let chunks = chunk_context(context, cfg)?;
    let q = embedder.embed(query);
    let mut trace = chunks
        .iter()
        .map(|c| {
            Ok(ChunkScore {
                chunk_offset: c.start_offset,
                len: c.tokens.len(),
                score: cosine(&q, &embedder.embed(&c.tokens))?,
                selected: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let budget = retrieval_budget(context.len(), cfg);
    let mut order: Vec<usize> = (0..trace.len()).filter(|&i| trace[i].score >= cfg.sim_threshold).collect();
    order.sort_by(|&a, &b| trace[b].score.total_cmp(&trace[a].score).then(a.cmp(&b)));
    let mut used = 0;
    for i in order {
        if used + trace[i].len <= budget {
            used += trace[i].len;
            trace[i].selected = true;
        }
    }

    let selected: TokenSeq =
        chunks.iter().zip(&trace).filter(|(_, s)| s.selected).flat_map(|(c, _)| c.tokens.iter().copied()).collect();
    Ok(Retrieval { context: selected, trace, budget })
}

/// Parses a corpus: one document per line, space-separated token ids.
/// Blank lines and `#` comments are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenSeq>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<Token>().map_err(|_| Error::Parse { line: i + 1, message: format!("bad token {t:?}") })
                })
                .collect()
        })
        .collect()
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<TokenSeq>> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn format_corpus(docs: &[TokenSeq]) -> String {
    docs.iter().map(|d| d.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ") + "\n").collect()
}
