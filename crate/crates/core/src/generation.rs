//! Demonstration pair generation: candidate sources from the model,
//! MMR filtering, then model translations of the kept sources.

use std::collections::HashSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatExchange, ChatMessage, Gateway, GatewayError, GenerationParams};
use crate::mmr::{mmr_select, FilterConfig, FilterError, SelectionTrace};
use crate::prompt::{LanguagePair, TemplateError, Templates};
use crate::text::{tokenize, TokenSequence};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("no usable candidate sentences in model output: {raw_response:?}")]
    NoCandidates { raw_response: String },
    #[error("empty translation for source sentence {sentence:?}")]
    EmptyTranslation { sentence: String },
    #[error("invalid demonstration pair: {0}")]
    InvalidPair(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Generated,
    Fixed,
    Pooled,
}

/// A (source, target) in-context example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DemonstrationPair {
    pub source: String,
    pub target: String,
    pub provenance: Provenance,
}

impl DemonstrationPair {
    pub fn new(
        source: impl Into<String>,
        target: impl Into<String>,
        provenance: Provenance,
    ) -> Result<Self, GenerationError> {
        let pair = DemonstrationPair {
            source: source.into().trim().to_string(),
            target: target.into().trim().to_string(),
            provenance,
        };
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(GenerationError::InvalidPair(format!(
                "both sides must be non-empty (source={:?}, target={:?})",
                pair.source, pair.target
            )));
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSource {
    pub text: String,
    pub tokens: TokenSequence,
    /// Position among the lines parsed from the model output.
    pub origin_index: usize,
}

fn marker_regex() -> &'static Regex {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    MARKER.get_or_init(|| {
        Regex::new(r"^(?:\(?\d{1,3}[.):]|[-*•‣–])\s+").expect("valid marker regex")
    })
}

fn strip_quotes(s: &str) -> Option<&str> {
    const PAIRS: [(char, char); 5] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’'), ('«', '»')];
    PAIRS.iter().find_map(|&(open, close)| {
        let inner = s.strip_prefix(open)?.strip_suffix(close)?;
        Some(inner.trim())
    })
}

fn clean_line(line: &str) -> String {
    let mut s = line.trim();
    loop {
        if let Some(m) = marker_regex().find(s) {
            s = s[m.end()..].trim();
            continue;
        }
        if let Some(inner) = strip_quotes(s) {
            s = inner;
            continue;
        }
        return s.to_string();
    }
}

/// Splits a model response into candidate sentences.
///
/// Lines carrying list markers (`1.`, `2)`, `-`, `*`, ...) are kept with
/// the marker and any surrounding quotes removed. When at least one line
/// is marked, unmarked lines are treated as preamble and dropped.
pub fn parse_candidates(response: &str) -> Vec<String> {
    let lines: Vec<&str> = response
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let any_marked = lines.iter().any(|l| marker_regex().is_match(l));
    lines
        .into_iter()
        .filter(|l| !any_marked || marker_regex().is_match(l))
        .map(clean_line)
        .filter(|l| !l.is_empty())
        .collect()
}

/// Drops token-empty lines, token-level duplicates and anything
/// token-identical to the query, keeping first occurrences in order.
pub fn dedup_candidates(lines: &[String], query: &TokenSequence) -> Vec<CandidateSource> {
    let mut seen: HashSet<TokenSequence> = HashSet::new();
    lines
        .iter()
        .enumerate()
        .filter_map(|(origin_index, text)| {
            let tokens = tokenize(text);
            if tokens.is_empty() || &tokens == query || !seen.insert(tokens.clone()) {
                return None;
            }
            Some(CandidateSource {
                text: text.clone(),
                tokens,
                origin_index,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SourceGeneration {
    pub candidates: Vec<CandidateSource>,
    pub exchanges: Vec<ChatExchange>,
}

/// Outcome of building the demonstrations for one query.
#[derive(Debug, Clone)]
pub struct DemonstrationSet {
    pub pairs: Vec<DemonstrationPair>,
    pub candidates: Vec<CandidateSource>,
    /// `None` when filtering was bypassed (`m == k`).
    pub trace: Option<SelectionTrace>,
    pub filtering_bypassed: bool,
    /// Fewer than `k` distinct candidates were available.
    pub shortfall: bool,
    /// Source generation first, then one translation per pair in pair order.
    pub exchanges: Vec<ChatExchange>,
    pub timing: GenerationTiming,
}

/// Wall-clock time spent in each generation stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GenerationTiming {
    pub source_generation: Duration,
    pub filtering: Duration,
    pub target_generation: Duration,
}

/// Runs the generation steps against one gateway with fixed templates,
/// decoding parameters and language pair.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub gateway: &'a dyn Gateway,
    pub templates: &'a Templates,
    pub params: &'a GenerationParams,
    pub langs: &'a LanguagePair,
}

impl<'a> Generator<'a> {
    /// Calls the gateway, retrying once on a malformed response.
    fn call_once_retry(&self, messages: &[ChatMessage]) -> Result<ChatExchange, GatewayError> {
        match self.gateway.complete(messages, self.params) {
            Err(GatewayError::MalformedResponse(_)) => self.gateway.complete(messages, self.params),
            other => other,
        }
    }

    /// Asks for `m` sentences related to `query` and parses them. At most
    /// `m` distinct candidates are kept.
    pub fn generate_sources(&self, query: &str, m: usize) -> Result<SourceGeneration, GenerationError> {
        let messages = self
            .templates
            .source_generation_messages(query, m, self.langs)?;
        let query_tokens = tokenize(query);
        let mut exchanges = Vec::with_capacity(1);
        for _ in 0..2 {
            let exchange = self.call_once_retry(&messages)?;
            let mut candidates =
                dedup_candidates(&parse_candidates(&exchange.response_text), &query_tokens);
            candidates.truncate(m);
            exchanges.push(exchange);
            if !candidates.is_empty() {
                return Ok(SourceGeneration {
                    candidates,
                    exchanges,
                });
            }
        }
        Err(GenerationError::NoCandidates {
            raw_response: exchanges
                .pop()
                .map(|e| e.response_text)
                .unwrap_or_default(),
        })
    }

    /// Translates one source sentence, with `fixed_pairs` as in-context
    /// examples when given. Only the first non-empty line of the response
    /// is kept.
    pub fn translate_source(
        &self,
        source: &str,
        fixed_pairs: Option<&[DemonstrationPair]>,
    ) -> Result<(DemonstrationPair, ChatExchange), GenerationError> {
        if source.trim().is_empty() {
            return Err(GenerationError::InvalidPair("empty source sentence".into()));
        }
        let messages =
            self.templates
                .translation_messages(source, fixed_pairs.unwrap_or(&[]), self.langs)?;
        let exchange = match self.call_once_retry(&messages) {
            Err(GatewayError::MalformedResponse(_)) => {
                return Err(GenerationError::EmptyTranslation {
                    sentence: source.to_string(),
                })
            }
            other => other?,
        };
        let target = first_line(&exchange.response_text).ok_or_else(|| {
            GenerationError::EmptyTranslation {
                sentence: source.to_string(),
            }
        })?;
        let pair = DemonstrationPair::new(source, target, Provenance::Generated)?;
        Ok((pair, exchange))
    }

    /// Generates sources, filters them down to `k` and translates the
    /// survivors concurrently. With `m == k` every parsed candidate (up to
    /// `k`) is used in generation order.
    pub fn build_demonstrations(
        &self,
        query: &str,
        config: &FilterConfig,
        fixed_pairs: Option<&[DemonstrationPair]>,
    ) -> Result<DemonstrationSet, GenerationError> {
        config.validate()?;
        let mut timing = GenerationTiming::default();
        let started = Instant::now();
        let generated = self.generate_sources(query, config.m())?;
        let candidates = generated.candidates;
        timing.source_generation = started.elapsed();

        let started = Instant::now();

        let (chosen, trace) = if config.filtering_enabled() {
            let tokens: Vec<TokenSequence> = candidates.iter().map(|c| c.tokens.clone()).collect();
            let trace = mmr_select(&tokenize(query), &tokens, config)?;
            (trace.selected.clone(), Some(trace))
        } else {
            ((0..candidates.len().min(config.k())).collect::<Vec<_>>(), None)
        };
        timing.filtering = started.elapsed();

        let started = Instant::now();

        let results: Vec<Result<(DemonstrationPair, ChatExchange), GenerationError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = chosen
                    .iter()
                    .map(|&i| {
                        let source = candidates[i].text.as_str();
                        scope.spawn(move || self.translate_source(source, fixed_pairs))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("translation worker panicked"))
                    .collect()
            });

        let mut exchanges = generated.exchanges;
        let mut pairs = Vec::with_capacity(results.len());
        for result in results {
            let (pair, exchange) = result?;
            pairs.push(pair);
            exchanges.push(exchange);
        }
        timing.target_generation = started.elapsed();

        Ok(DemonstrationSet {
            shortfall: pairs.len() < config.k(),
            pairs,
            candidates,
            trace,
            filtering_bypassed: !config.filtering_enabled(),
            exchanges,
            timing,
        })
    }
}

fn first_line(text: &str) -> Option<&str> {
    text.lines().map(str::trim).find(|l| !l.is_empty())
}
