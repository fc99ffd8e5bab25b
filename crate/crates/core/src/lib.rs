//! Self-generated in-context demonstrations for LLM machine translation.
//!
//! For each query the model first writes `m` related source sentences.
//! An MMR filter keeps `k` of them that are relevant to the query yet
//! mutually diverse (relevance is recall-based n-gram overlap, see
//! [`text::alpha`]), the model translates the kept sentences, and the
//! resulting pairs become few-shot demonstrations for translating the
//! query itself. Generated pairs can also be accumulated in a
//! [`pool::DemonstrationPool`] and reused through BM25 retrieval with an
//! n-gram recall rerank.
//!
//! Module map:
//!
//! - [`text`]: tokenization, n-gram profiles, recall scores
//! - [`mmr`]: greedy relevance/diversity selection
//! - [`gateway`]: chat-completion client, transcript record/replay
//! - [`prompt`]: prompt templates and few-shot layout
//! - [`generation`]: candidate sources, filtering, target-side translation
//! - [`pipeline`]: translation modes, batches, accumulation runs
//! - [`pool`]: demonstration pool and retrieval
//! - [`metrics`]: relevance, uniformity and output length diagnostics

pub mod gateway;
pub mod generation;
pub mod metrics;
pub mod mmr;
pub mod pipeline;
pub mod pool;
pub mod prompt;
pub mod text;

pub use generation::{DemonstrationPair, Provenance};
pub use mmr::{FilterConfig, SelectionTrace};
pub use pipeline::{Mode, PipelineConfig, TranslationRecord};
pub use pool::DemonstrationPool;
pub use prompt::LanguagePair;
pub use text::{alpha, tokenize, TokenSequence};

#[cfg(any(test, feature = "test-support"))]
pub mod testing;
