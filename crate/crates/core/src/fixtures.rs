//! Deterministic toy scenarios used by the tests, the `verify` command and the
//! `fixture` command.
//!
//! The needle scenario has a 24-token vocabulary:
//!
//! | tokens   | role                                       |
//! |----------|--------------------------------------------|
//! | 0        | gold answer                                |
//! | 1, 2, 3  | distractor answers                         |
//! | 4, 5     | query keywords                             |
//! | 6, 7     | needle (trigger for the gold answer)       |
//! | 6, 8     | misleading needle (trigger for token 2)    |
//! | 10..24   | filler                                     |
//!
//! Document 0 hides the needle in one chunk among filler. Document 1 looks
//! similar to the query but carries the misleading needle instead. The
//! drafter knows the fact well (confidence 0.9); the target, reading the
//! whole long document, is diluted to confidence 0.4 and leans toward
//! distractor 1.

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::lm::{AnyLm, ContextOracleLm, Fact, NGramLm, ProbVector, Token, TokenSeq, Vocab};
use crate::retrieval::{format_corpus, RetrievalConfig};
use crate::sampling::RngStream;

pub const NEEDLE_VOCAB: usize = 24;
pub const GOLD: Token = 0;
pub const DISTRACTOR: Token = 1;
pub const MISLEADING_ANSWER: Token = 2;
pub const QUERY: [Token; 2] = [4, 5];
pub const NEEDLE: [Token; 2] = [6, 7];
pub const MISLEADING_NEEDLE: [Token; 2] = [6, 8];
const FILLER: std::ops::Range<Token> = 10..24;

pub const CHUNK_SIZE: usize = 16;
pub const CHUNKS_PER_DOC: usize = 24;
/// Chunk of document 0 holding the needle.
pub const NEEDLE_CHUNK: usize = 13;

pub const TARGET_CONFIDENCE: f64 = 0.4;
pub const DRAFTER_CONFIDENCE: f64 = 0.9;

/// Chunking sized so the budget is exactly one chunk: 384 / 24 = 16 tokens.
pub fn needle_retrieval_config() -> RetrievalConfig {
    RetrievalConfig { chunk_size: CHUNK_SIZE, sim_threshold: 0.3, min_budget: CHUNK_SIZE, lambda: 24.0, embed_dim: 64 }
}

fn filler_doc(seed: u64) -> TokenSeq {
    let mut rng = RngStream::new(seed);
    let span = (FILLER.end - FILLER.start) as f64;
    (0..CHUNK_SIZE * CHUNKS_PER_DOC).map(|_| FILLER.start + (rng.uniform() * span) as Token).collect()
}

fn plant(doc: &mut [Token], chunk: usize, trigger: [Token; 2]) {
    let [q1, q2] = QUERY;
    let [n1, n2] = trigger;
    let piece = [q1, q2, 10, q1, n1, n2, q2, 11, q1, 12, q2, 13, q1, q2, 14, 15];
    doc[chunk * CHUNK_SIZE..(chunk + 1) * CHUNK_SIZE].copy_from_slice(&piece);
}

/// Two documents: the long context with the needle, and an unrelated one
/// carrying the misleading needle.
pub fn needle_corpus() -> Vec<TokenSeq> {
    let mut doc = filler_doc(17);
    plant(&mut doc, NEEDLE_CHUNK, NEEDLE);
    let mut other = filler_doc(18);
    plant(&mut other, 5, MISLEADING_NEEDLE);
    vec![doc, other]
}

/// Target base distribution: most of the non-answer mass on the distractor.
pub fn target_base() -> ProbVector {
    let mut v = vec![0.01; NEEDLE_VOCAB];
    v[0] = 0.05;
    v[1] = 0.45;
    v[2] = 0.15;
    v[3] = 0.15;
    ProbVector::new(v).expect("target base sums to one")
}

pub fn needle_target() -> ContextOracleLm {
    ContextOracleLm::new(target_base())
        .and_then(|m| m.with_fact(Fact::new(NEEDLE.to_vec(), GOLD, TARGET_CONFIDENCE)?))
        .expect("valid target fixture")
}

pub fn needle_drafter() -> ContextOracleLm {
    ContextOracleLm::new(ProbVector::uniform(NEEDLE_VOCAB))
        .and_then(|m| m.with_fact(Fact::new(NEEDLE.to_vec(), GOLD, DRAFTER_CONFIDENCE)?))
        .and_then(|m| m.with_fact(Fact::new(MISLEADING_NEEDLE.to_vec(), MISLEADING_ANSWER, DRAFTER_CONFIDENCE)?))
        .expect("valid drafter fixture")
}

/// Bigram model fitted on the needle corpus, used for self-speculation.
pub fn corpus_bigram() -> NGramLm {
    NGramLm::fit(Vocab::new(NEEDLE_VOCAB).expect("vocab"), 1, 0.5, &needle_corpus()).expect("valid corpus")
}

/// Scenarios the `fixture` command can write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Drafter with the retrieved needle vs diluted target.
    Needle,
    /// Same models, drafter retrieves from the unrelated document.
    Unrelated,
    /// Drafter and target are the same bigram model and see the same context.
    SelfSpeculation,
}

impl Scenario {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "needle" => Some(Self::Needle),
            "unrelated" => Some(Self::Unrelated),
            "self-spec" => Some(Self::SelfSpeculation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Needle => "needle",
            Self::Unrelated => "unrelated",
            Self::SelfSpeculation => "self-spec",
        }
    }
}

/// Writes the corpus, both backends and a config file for `scenario` into
/// `dir`. Returns the config path.
pub fn write_scenario(scenario: Scenario, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("corpus.txt"), format_corpus(&needle_corpus()))?;
    let r = needle_retrieval_config();
    let (target, drafter): (AnyLm, AnyLm) = match scenario {
        Scenario::SelfSpeculation => (corpus_bigram().into(), corpus_bigram().into()),
        _ => (needle_target().into(), needle_drafter().into()),
    };
    target.save(dir.join("target.lm"))?;
    drafter.save(dir.join("drafter.lm"))?;

    let query = QUERY.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    let mut conf = format!(
        "# {} scenario\ncorpus = corpus.txt\ntarget = target.lm\ndrafter = drafter.lm\nquery = {query}\n\
         chunk_size = {}\nmin_budget = {}\nlambda = {}\nsim_threshold = {}\nembed_dim = {}\n\
         gamma = 10\ntemperature = 1\nseed = 7\n",
        scenario.name(),
        r.chunk_size,
        r.min_budget,
        r.lambda,
        r.sim_threshold,
        r.embed_dim
    );
    match scenario {
        Scenario::Needle => conf.push_str(&format!("gold = {GOLD}\neta = 20\nmax_tokens = 1\nrepetitions = 100\n")),
        Scenario::Unrelated => conf.push_str(&format!(
            "gold = {GOLD}\nretrieval_doc = 1\nmax_tokens = 1\nrepetitions = 100\netas = 0 5 10 20 40 50\n"
        )),
        Scenario::SelfSpeculation => conf.push_str("retrieval = full\neta = 0\nmax_tokens = 200\nrepetitions = 1\n"),
    }
    let path = dir.join(format!("{}.conf", scenario.name()));
    std::fs::write(&path, conf)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::LmBackend;
    use crate::retrieval::retrieve;

    #[test]
    fn needle_is_retrieved_alone() {
        let corpus = needle_corpus();
        let r = retrieve(&QUERY, &corpus[0], &needle_retrieval_config()).unwrap();
        assert_eq!(r.budget, CHUNK_SIZE);
        assert_eq!(r.context, corpus[0][NEEDLE_CHUNK * CHUNK_SIZE..(NEEDLE_CHUNK + 1) * CHUNK_SIZE]);
        assert!(r.context.windows(2).any(|w| w == NEEDLE));
    }

    #[test]
    fn unrelated_document_has_only_the_misleading_needle() {
        let corpus = needle_corpus();
        let r = retrieve(&QUERY, &corpus[1], &needle_retrieval_config()).unwrap();
        assert!(r.context.windows(2).any(|w| w == MISLEADING_NEEDLE));
        assert!(!corpus[1].windows(2).any(|w| w == NEEDLE));
        assert!(!corpus[0].windows(2).any(|w| w == MISLEADING_NEEDLE));
    }

    #[test]
    fn models_see_what_they_should() {
        let corpus = needle_corpus();
        let p = needle_target().distribution(&corpus[0]).unwrap();
        assert_eq!(p[GOLD as usize], TARGET_CONFIDENCE);
        assert_eq!(p.argmax(), GOLD);
        assert!(p[DISTRACTOR as usize] > p[MISLEADING_ANSWER as usize]);
        let q = needle_drafter().distribution(&QUERY).unwrap();
        assert_eq!(q, ProbVector::uniform(NEEDLE_VOCAB));
        assert_eq!(needle_drafter().vocab(), needle_target().vocab());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in [Scenario::Needle, Scenario::Unrelated, Scenario::SelfSpeculation] {
            assert_eq!(Scenario::parse(s.name()), Some(s));
        }
        assert_eq!(Scenario::parse("nope"), None);
    }
}
