//! Retrieval-augmented speculative decoding on exact-arithmetic language models.
//!
//! A drafter running on a short retrieved context proposes tokens for a
//! target running on the full long context. Verification uses a target
//! distribution shifted toward the drafter by one knowledge-distillation step,
//! so drafts the better-informed drafter is confident about are accepted more
//! often. The crate provides:
//!
//! - [`lm`]: backend trait and three small deterministic language models.
//! - [`retrieval`]: chunking, hashed bag-of-tokens embeddings, budgeted top-k selection.
//! - [`sampling`]: tempered softmax, reproducible categorical sampling, the distillation gradient.
//! - [`engine`]: the draft / verify / resample loop.
//! - [`oracle`]: exact per-step output distributions and Monte Carlo conformance checks.
//! - [`cost`]: per-step FLOPs model and speedup curves.
//! - [`harness`]: the experiment runner behind the `rapid` binary.
//!
//! The `book/` directory at the repository root walks through the math; its
//! code snippets are compiled and run as doc-tests of this crate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod json;
pub mod lm;
pub mod oracle;
pub mod retrieval;
pub mod sampling;
pub mod verify;

pub use error::{Error, Result};

macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        )*
    };
}

book_chapters! {
    BookIntroduction => "introduction.md",
    BookSpeculativeSampling => "speculative-sampling.md",
    BookRetrieval => "retrieval.md",
    BookAugmentedTarget => "augmented-target.md",
    BookOutputDistribution => "output-distribution.md",
    BookCostModel => "cost-model.md",
    BookExperiments => "experiments.md",
}
