//! Tokenization, n-gram profiles and recall-based relevance scoring.
//!
//! Relevance between a query `q` and a sentence `x` is the mean of four
//! clipped n-gram recalls (orders 1 through 4), each taken relative to the
//! n-grams of `q`. The score is asymmetric: `alpha(q, x)` asks how much of
//! `q` is covered by `x`, not the other way round.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier persisted alongside artifacts that depend on tokenization.
pub const TOKENIZER_ID: &str = "lowercase-alnum-v1";

/// Highest n-gram order that contributes to [`alpha`].
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TextError {
    #[error("n-gram order {0} is outside 1..=4")]
    OrderOutOfRange(usize),
}

/// Lowercased word tokens of one sentence.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    /// Tokens joined by single spaces.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }

    pub fn reversed(&self) -> TokenSequence {
        TokenSequence(self.0.iter().rev().cloned().collect())
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.joined())
    }
}

impl<'a> IntoIterator for &'a TokenSequence {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Lowercases `text` and splits it on every maximal run of characters that
/// are not Unicode alphanumeric.
pub fn tokenize(text: &str) -> TokenSequence {
    let lowered = text.to_lowercase();
    TokenSequence(
        lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_owned)
            .collect(),
    )
}

/// An n-gram order in `1..=4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NgramOrder(usize);

impl NgramOrder {
    pub const UNIGRAM: NgramOrder = NgramOrder(1);
    pub const BIGRAM: NgramOrder = NgramOrder(2);
    pub const TRIGRAM: NgramOrder = NgramOrder(3);
    pub const FOURGRAM: NgramOrder = NgramOrder(4);

    pub const ALL: [NgramOrder; MAX_ORDER] =
        [Self::UNIGRAM, Self::BIGRAM, Self::TRIGRAM, Self::FOURGRAM];

    pub fn new(n: usize) -> Result<Self, TextError> {
        if (1..=MAX_ORDER).contains(&n) {
            Ok(NgramOrder(n))
        } else {
            Err(TextError::OrderOutOfRange(n))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for NgramOrder {
    type Error = TextError;

    fn try_from(n: usize) -> Result<Self, Self::Error> {
        NgramOrder::new(n)
    }
}

/// Multiset of the order-`n` windows of a token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramProfile {
    order: NgramOrder,
    counts: HashMap<Vec<String>, usize>,
}

impl NGramProfile {
    pub fn order(&self) -> NgramOrder {
        self.order
    }

    pub fn counts(&self) -> &HashMap<Vec<String>, usize> {
        &self.counts
    }

    pub fn count(&self, gram: &[String]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// Number of windows, i.e. the sum of all counts.
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn ngram_profile(seq: &TokenSequence, order: NgramOrder) -> NGramProfile {
    let counts = window_counts(seq.as_slice(), order.get())
        .into_iter()
        .map(|(gram, c)| (gram.to_vec(), c))
        .collect();
    NGramProfile { order, counts }
}

fn window_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and the query's total window count at one order.
pub fn recall_counts(q: &TokenSequence, x: &TokenSequence, order: NgramOrder) -> (usize, usize) {
    let n = order.get();
    if q.len() < n {
        return (0, 0);
    }
    let total = q.len() - n + 1;
    let q_counts = window_counts(q.as_slice(), n);
    let x_counts = window_counts(x.as_slice(), n);
    let matched = q_counts
        .iter()
        .map(|(gram, &cq)| cq.min(x_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matched, total)
}

/// Recall of `q`'s order-`n` windows in `x`; 0 when `q` has no such windows.
pub fn recall_n(q: &TokenSequence, x: &TokenSequence, order: NgramOrder) -> f64 {
    match recall_counts(q, x, order) {
        (_, 0) => 0.0,
        (matched, total) => matched as f64 / total as f64,
    }
}

/// Relevance score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceScore(f64);

impl RelevanceScore {
    pub const ZERO: RelevanceScore = RelevanceScore(0.0);

    pub fn get(self) -> f64 {
        self.0
    }
}

impl From<RelevanceScore> for f64 {
    fn from(s: RelevanceScore) -> f64 {
        s.0
    }
}

/// Mean of [`recall_n`] over orders 1..=4. Always divides by four, so
/// queries shorter than four tokens can never reach 1.0.
pub fn alpha(q: &TokenSequence, x: &TokenSequence) -> RelevanceScore {
    let sum: f64 = NgramOrder::ALL.iter().map(|&o| recall_n(q, x, o)).sum();
    RelevanceScore(sum / MAX_ORDER as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence(tokens.iter().map(|s| s.to_string()).collect())
    }

    fn gram(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, world!"), seq(&["hello", "world"]));
        assert_eq!(tokenize(""), seq(&[]));
        assert_eq!(
            tokenize("A pride of lions."),
            seq(&["a", "pride", "of", "lions"])
        );
    }

    #[test]
    fn tokenize_unicode() {
        assert_eq!(tokenize("Ünïcode--TEXT 42x"), seq(&["ünïcode", "text", "42x"]));
        assert_eq!(tokenize("¿¡...!?"), seq(&[]));
        assert_eq!(tokenize("Straße ДОМ"), seq(&["straße", "дом"]));
    }

    #[test]
    fn profile_examples() {
        let p = ngram_profile(&seq(&["a", "b", "a", "b"]), NgramOrder::BIGRAM);
        assert_eq!(p.counts().len(), 2);
        assert_eq!(p.count(&gram(&["a", "b"])), 2);
        assert_eq!(p.count(&gram(&["b", "a"])), 1);
        assert_eq!(p.total(), 3);

        assert!(ngram_profile(&seq(&["a"]), NgramOrder::BIGRAM).is_empty());

        let p = ngram_profile(&seq(&["a", "b", "c"]), NgramOrder::UNIGRAM);
        assert_eq!(p.counts().len(), 3);
        assert!(p.counts().values().all(|&c| c == 1));
    }

    #[test]
    fn order_range_is_enforced() {
        assert_eq!(NgramOrder::new(0), Err(TextError::OrderOutOfRange(0)));
        assert_eq!(NgramOrder::new(5), Err(TextError::OrderOutOfRange(5)));
        assert_eq!(NgramOrder::new(4).unwrap().get(), 4);
    }

    #[test]
    fn recall_examples() {
        let q = seq(&["a", "b", "c"]);
        let x = seq(&["a", "b", "d"]);
        assert_eq!(recall_n(&q, &x, NgramOrder::UNIGRAM), 2.0 / 3.0);
        assert_eq!(recall_n(&q, &q, NgramOrder::TRIGRAM), 1.0);
        let ab = seq(&["a", "b"]);
        assert_eq!(recall_n(&ab, &ab, NgramOrder::TRIGRAM), 0.0);
    }

    #[test]
    fn recall_is_clipped() {
        // q has "a" three times, x only once.
        let q = seq(&["a", "a", "a"]);
        let x = seq(&["a", "b"]);
        assert_eq!(recall_counts(&q, &x, NgramOrder::UNIGRAM), (1, 3));
        assert_eq!(recall_counts(&x, &q, NgramOrder::UNIGRAM), (1, 2));
    }

    #[test]
    fn alpha_examples() {
        let long = seq(&["a", "b", "c", "d", "e"]);
        assert_eq!(alpha(&long, &long).get(), 1.0);
        let ab = seq(&["a", "b"]);
        assert_eq!(alpha(&ab, &ab).get(), 0.5);
        assert_eq!(alpha(&seq(&["a", "b", "c"]), &seq(&["x", "y"])).get(), 0.0);
    }

    #[test]
    fn alpha_is_asymmetric() {
        let q = seq(&["a", "b"]);
        let x = seq(&["a", "b", "c", "d"]);
        // q fully covered by x at orders 1-2; x only half covered by q.
        assert_eq!(alpha(&q, &x).get(), 0.5);
        assert_eq!(alpha(&x, &q).get(), (0.5 + 1.0 / 3.0) / 4.0);
        assert_ne!(alpha(&q, &x), alpha(&x, &q));
    }

    #[test]
    fn bigram_recall_is_order_sensitive() {
        let q = seq(&["the", "cat", "sat", "down"]);
        let x = q.clone();
        assert_eq!(recall_n(&q, &x, NgramOrder::BIGRAM), 1.0);
        assert_eq!(recall_n(&q, &x.reversed(), NgramOrder::BIGRAM), 0.0);
        assert_eq!(recall_n(&q, &x.reversed(), NgramOrder::UNIGRAM), 1.0);
    }

    #[test]
    fn identity_ceiling_requires_four_tokens() {
        for len in 0..8 {
            let s = TokenSequence((0..len).map(|i| format!("t{i}")).collect());
            let a = alpha(&s, &s).get();
            if len >= 4 {
                assert_eq!(a, 1.0);
            } else {
                assert!(a < 1.0);
            }
        }
    }
}
