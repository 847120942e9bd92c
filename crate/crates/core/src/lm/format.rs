//! Line-delimited text format for backends.
//!
//! ```text
//! # comment
//! <kind> <vocab> <order> <smoothing> [window=<n>]
//! <record>...
//! ```
//!
//! `kind` is `table`, `ngram` or `oracle`. Records put window tokens left of a
//! `|` and values right of it:
//!
//! - table: `fallback | p0 p1 ...` once, then `w1 .. wm | p0 p1 ...`
//! - ngram: `w1 .. wm | c0 c1 ...` (integer counts)
//! - oracle: `base | p0 p1 ...` once, then `fact t1 .. tk | answer confidence`
//!
//! An empty window is a line that starts with `|`. Floats are written in
//! shortest round-trip form, so a table survives save/load bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use super::{ContextOracleLm, Fact, LmBackend, LogitVector, NGramLm, ProbVector, TableLm, Token, Vocab};
use crate::error::{Error, Result};

/// Any of the built-in backends, as loaded from a file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyLm {
    Table(TableLm),
    NGram(NGramLm),
    Oracle(ContextOracleLm),
}

impl LmBackend for AnyLm {
    fn vocab(&self) -> Vocab {
        match self {
            AnyLm::Table(m) => m.vocab(),
            AnyLm::NGram(m) => m.vocab(),
            AnyLm::Oracle(m) => m.vocab(),
        }
    }

    fn context_window(&self) -> Option<usize> {
        match self {
            AnyLm::Table(m) => m.context_window(),
            AnyLm::NGram(m) => m.context_window(),
            AnyLm::Oracle(m) => m.context_window(),
        }
    }

    fn logits(&self, ctx: &[Token]) -> Result<LogitVector> {
        match self {
            AnyLm::Table(m) => m.logits(ctx),
            AnyLm::NGram(m) => m.logits(ctx),
            AnyLm::Oracle(m) => m.logits(ctx),
        }
    }
}

impl From<TableLm> for AnyLm {
    fn from(m: TableLm) -> Self {
        AnyLm::Table(m)
    }
}

impl From<NGramLm> for AnyLm {
    fn from(m: NGramLm) -> Self {
        AnyLm::NGram(m)
    }
}

impl From<ContextOracleLm> for AnyLm {
    fn from(m: ContextOracleLm) -> Self {
        AnyLm::Oracle(m)
    }
}

impl AnyLm {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let window = |w: Option<usize>| w.map(|w| format!(" window={w}")).unwrap_or_default();
        match self {
            AnyLm::Table(m) => {
                let _ = writeln!(out, "table {} {} 0{}", m.vocab().size(), m.order(), window(m.context_window()));
                let _ = writeln!(out, "fallback | {}", join(m.fallback().iter()));
                for (key, probs) in m.entries() {
                    let _ = writeln!(out, "{}| {}", key_text(key), join(probs.iter()));
                }
            }
            AnyLm::NGram(m) => {
                let _ = writeln!(
                    out,
                    "ngram {} {} {}{}",
                    m.vocab().size(),
                    m.order(),
                    m.smoothing(),
                    window(m.context_window())
                );
                for (key, counts) in m.entries() {
                    let _ = writeln!(out, "{}| {}", key_text(key), join(counts.iter()));
                }
            }
            AnyLm::Oracle(m) => {
                let _ = writeln!(out, "oracle {} 0 0{}", m.vocab().size(), window(m.context_window()));
                let _ = writeln!(out, "base | {}", join(m.base().iter()));
                for f in m.facts() {
                    let _ = writeln!(out, "fact {}| {} {}", key_text(&f.trigger), f.answer, f.confidence);
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 0, message: "missing header".into() })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(perr(hline, "header must be: kind vocab order smoothing [window=N]"));
        }
        let vocab = Vocab::new(num(hline, fields[1])?).map_err(|e| perr(hline, e))?;
        let order: usize = num(hline, fields[2])?;
        let smoothing: f64 = num(hline, fields[3])?;
        let window = match fields.get(4) {
            Some(f) => {
                Some(num::<usize>(hline, f.strip_prefix("window=").ok_or_else(|| perr(hline, "expected window=N"))?)?)
            }
            None => None,
        };
        let records: Vec<(usize, Record)> =
            lines.map(|(n, l)| split_record(n, l).map(|r| (n, r))).collect::<Result<_>>()?;

        let lm = match fields[0] {
            "table" => {
                let mut fallback = None;
                let mut entries = Vec::new();
                for (n, r) in records {
                    let probs = ProbVector::new(nums(n, &r.values)?).map_err(|e| perr(n, e))?;
                    match r.tag {
                        Some("fallback") => fallback = Some(probs),
                        None => entries.push((n, tokens(n, &r.key)?, probs)),
                        Some(t) => return Err(perr(n, format!("unexpected tag {t:?} in table"))),
                    }
                }
                let fallback = fallback.ok_or_else(|| perr(hline, "table has no fallback record"))?;
                let mut lm = TableLm::new(vocab, order, fallback).map_err(|e| perr(hline, e))?;
                for (n, key, probs) in entries {
                    lm.insert(key, probs).map_err(|e| perr(n, e))?;
                }
                if let Some(w) = window {
                    lm = lm.with_context_window(w);
                }
                AnyLm::Table(lm)
            }
            "ngram" => {
                let mut lm = NGramLm::new(vocab, order, smoothing).map_err(|e| perr(hline, e))?;
                for (n, r) in records {
                    if let Some(t) = r.tag {
                        return Err(perr(n, format!("unexpected tag {t:?} in ngram")));
                    }
                    lm.set_counts(tokens(n, &r.key)?, nums(n, &r.values)?).map_err(|e| perr(n, e))?;
                }
                if let Some(w) = window {
                    lm = lm.with_context_window(w);
                }
                AnyLm::NGram(lm)
            }
            "oracle" => {
                let mut base = None;
                let mut facts = Vec::new();
                for (n, r) in records {
                    match r.tag {
                        Some("base") => base = Some(ProbVector::new(nums(n, &r.values)?).map_err(|e| perr(n, e))?),
                        Some("fact") => {
                            if r.values.len() != 2 {
                                return Err(perr(n, "fact record needs: answer confidence"));
                            }
                            let fact = Fact::new(tokens(n, &r.key)?, num(n, r.values[0])?, num(n, r.values[1])?)
                                .map_err(|e| perr(n, e))?;
                            facts.push((n, fact));
                        }
                        _ => return Err(perr(n, "oracle records must be tagged base or fact")),
                    }
                }
                let base = base.ok_or_else(|| perr(hline, "oracle has no base record"))?;
                if base.len() != vocab.size() {
                    return Err(perr(hline, "base length differs from vocabulary size"));
                }
                let mut lm = ContextOracleLm::new(base).map_err(|e| perr(hline, e))?;
                for (n, fact) in facts {
                    lm.add_fact(fact).map_err(|e| perr(n, e))?;
                }
                if let Some(w) = window {
                    lm = lm.with_context_window(w);
                }
                AnyLm::Oracle(lm)
            }
            other => return Err(perr(hline, format!("unknown backend kind {other:?}"))),
        };
        Ok(lm)
    }
}

struct Record<'a> {
    tag: Option<&'a str>,
    key: Vec<&'a str>,
    values: Vec<&'a str>,
}

fn split_record(line: usize, text: &str) -> Result<Record<'_>> {
    let (left, right) = text.split_once('|').ok_or_else(|| perr(line, "record is missing '|'"))?;
    let mut key: Vec<&str> = left.split_whitespace().collect();
    let tag = match key.first() {
        Some(&t) if t.parse::<Token>().is_err() => {
            key.remove(0);
            Some(t)
        }
        _ => None,
    };
    Ok(Record { tag, key, values: right.split_whitespace().collect() })
}

fn key_text(key: &[Token]) -> String {
    key.iter().map(|t| format!("{t} ")).collect()
}

fn join<T: std::fmt::Display>(values: impl Iterator<Item = T>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn perr(line: usize, message: impl std::fmt::Display) -> Error {
    Error::Parse { line, message: message.to_string() }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| perr(line, format!("cannot parse {s:?}")))
}

fn nums<T: std::str::FromStr>(line: usize, xs: &[&str]) -> Result<Vec<T>> {
    xs.iter().map(|s| num(line, s)).collect()
}

fn tokens(line: usize, xs: &[&str]) -> Result<Vec<Token>> {
    nums(line, xs)
}
