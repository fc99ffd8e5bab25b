//! Accumulated demonstration pool with an Okapi BM25 index over the
//! source sides, and two-stage retrieval: BM25 shortlist, then rerank by
//! n-gram recall against the query.
//!
//! On disk a pool is newline-delimited JSON: one header record followed
//! by one record per entry in insertion order.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::{DemonstrationPair, Provenance};
use crate::text::{alpha, tokenize, TokenSequence, TOKENIZER_ID};

pub const POOL_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_TOP_N: usize = 100;

const POOL_KIND: &str = "demonstration_pool";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("pair source {0:?} has no tokens")]
    EmptySource(String),
    #[error("retrieval depth k={k} exceeds shortlist size top_n={top_n}")]
    InvalidDepth { k: usize, top_n: usize },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported pool schema version {found} (expected {expected})")]
    Version {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: pool was built with tokenizer {found:?}, this build uses {expected:?}")]
    Tokenizer {
        path: String,
        found: String,
        expected: String,
    },
    #[error("{path}: header declares {declared} documents but {found} were read")]
    CountMismatch {
        path: String,
        declared: usize,
        found: usize,
    },
    #[error("incremental index differs from a rebuilt index: {0}")]
    IndexMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PoolError + '_ {
    move |source| PoolError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

/// Unigram term statistics over the source side of every pool entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bm25Index {
    params: Bm25Params,
    document_frequencies: HashMap<String, usize>,
    term_frequencies: Vec<HashMap<String, usize>>,
    document_lengths: Vec<usize>,
    total_length: usize,
}

impl Bm25Index {
    pub fn new(params: Bm25Params) -> Self {
        Bm25Index {
            params,
            ..Default::default()
        }
    }

    pub fn build<'a>(params: Bm25Params, docs: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut index = Bm25Index::new(params);
        for doc in docs {
            index.add(doc);
        }
        index
    }

    pub fn add(&mut self, tokens: &TokenSequence) {
        let mut tf: HashMap<String, usize> = HashMap::new();
        for t in tokens {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        for term in tf.keys() {
            *self.document_frequencies.entry(term.clone()).or_insert(0) += 1;
        }
        self.term_frequencies.push(tf);
        self.document_lengths.push(tokens.len());
        self.total_length += tokens.len();
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn total_documents(&self) -> usize {
        self.document_lengths.len()
    }

    pub fn average_document_length(&self) -> f64 {
        if self.document_lengths.is_empty() {
            0.0
        } else {
            self.total_length as f64 / self.document_lengths.len() as f64
        }
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.document_frequencies.get(term).copied().unwrap_or(0)
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.total_documents() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Okapi BM25 of document `doc` against `query`; repeated query terms
    /// contribute once per occurrence.
    pub fn score(&self, query: &TokenSequence, doc: usize) -> f64 {
        let tf = &self.term_frequencies[doc];
        let norm = 1.0 - self.params.b
            + self.params.b * self.document_lengths[doc] as f64 / self.average_document_length();
        query
            .iter()
            .map(|term| match tf.get(term) {
                None => 0.0,
                Some(&f) => {
                    let f = f as f64;
                    self.idf(term) * f * (self.params.k1 + 1.0) / (f + self.params.k1 * norm)
                }
            })
            .sum()
    }

    /// Describes the first difference from `other`, if any.
    fn diff(&self, other: &Bm25Index) -> Option<String> {
        if self.total_documents() != other.total_documents() {
            return Some(format!(
                "document count {} vs {}",
                self.total_documents(),
                other.total_documents()
            ));
        }
        if self.total_length != other.total_length {
            return Some(format!(
                "total length {} vs {}",
                self.total_length, other.total_length
            ));
        }
        if self.document_frequencies != other.document_frequencies {
            return Some("document frequencies differ".into());
        }
        if let Some(i) = (0..self.total_documents()).find(|&i| {
            self.term_frequencies[i] != other.term_frequencies[i]
                || self.document_lengths[i] != other.document_lengths[i]
        }) {
            return Some(format!("term statistics of document {i} differ"));
        }
        (self != other).then(|| "parameters differ".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub pair: DemonstrationPair,
    pub source_tokens: TokenSequence,
    pub insert_sequence: u64,
    pub origin_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertOutcome {
    Inserted { insert_sequence: u64 },
    /// An entry with the same normalized source and target already exists.
    Duplicate { existing_sequence: u64 },
}

impl InsertOutcome {
    pub fn is_duplicate(&self) -> bool {
        matches!(self, InsertOutcome::Duplicate { .. })
    }
}

/// A pool entry returned by retrieval together with both stage scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub pair: DemonstrationPair,
    pub insert_sequence: u64,
    pub bm25: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolStats {
    pub size: usize,
    pub vocabulary: usize,
    pub mean_source_tokens: f64,
    pub min_source_tokens: usize,
    pub max_source_tokens: usize,
    pub median_source_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolHeader {
    schema_version: u32,
    kind: String,
    tokenizer: String,
    bm25: Bm25Params,
    document_count: usize,
    next_sequence: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredEntry {
    insert_sequence: u64,
    source: String,
    target: String,
    provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin_query: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationPool {
    entries: Vec<PoolEntry>,
    index: Bm25Index,
    keys: HashMap<(TokenSequence, String), u64>,
    next_sequence: u64,
}

impl Default for DemonstrationPool {
    fn default() -> Self {
        Self::with_params(Bm25Params::default())
    }
}

impl DemonstrationPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(params: Bm25Params) -> Self {
        DemonstrationPool {
            entries: Vec::new(),
            index: Bm25Index::new(params),
            keys: HashMap::new(),
            next_sequence: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    pub fn insert(
        &mut self,
        pair: DemonstrationPair,
        origin_query: Option<String>,
    ) -> Result<InsertOutcome, PoolError> {
        let source_tokens = tokenize(&pair.source);
        if source_tokens.is_empty() {
            return Err(PoolError::EmptySource(pair.source));
        }
        let key = (source_tokens.clone(), pair.target.clone());
        if let Some(&existing_sequence) = self.keys.get(&key) {
            return Ok(InsertOutcome::Duplicate { existing_sequence });
        }
        let insert_sequence = self.next_sequence;
        self.next_sequence += 1;
        self.push_entry(PoolEntry {
            pair,
            source_tokens,
            insert_sequence,
            origin_query,
        });
        self.keys.insert(key, insert_sequence);
        Ok(InsertOutcome::Inserted { insert_sequence })
    }

    fn push_entry(&mut self, entry: PoolEntry) {
        self.index.add(&entry.source_tokens);
        self.entries.push(entry);
    }

    /// BM25 of the entry at `position` (insertion order) against `query`.
    pub fn bm25_score(&self, query: &TokenSequence, position: usize) -> f64 {
        self.index.score(query, position)
    }

    /// Two-stage retrieval. Stage one keeps the `top_n` entries with the
    /// highest BM25; stage two reorders them by `alpha(query, source)` and
    /// returns the first `k`. Ties in either stage go to the earlier entry.
    pub fn rbm25_retrieve(
        &self,
        query: &str,
        top_n: usize,
        k: usize,
    ) -> Result<Vec<Retrieved>, PoolError> {
        if k > top_n {
            return Err(PoolError::InvalidDepth { k, top_n });
        }
        let query_tokens = tokenize(query);
        let mut shortlist: Vec<(usize, f64)> = (0..self.entries.len())
            .map(|i| (i, self.index.score(&query_tokens, i)))
            .collect();
        shortlist.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.sequence(a.0).cmp(&self.sequence(b.0)))
        });
        shortlist.truncate(top_n);

        let mut reranked: Vec<Retrieved> = shortlist
            .into_iter()
            .map(|(i, bm25)| {
                let entry = &self.entries[i];
                Retrieved {
                    pair: entry.pair.clone(),
                    insert_sequence: entry.insert_sequence,
                    bm25,
                    alpha: alpha(&query_tokens, &entry.source_tokens).get(),
                }
            })
            .collect();
        reranked.sort_by(|a, b| match b.alpha.total_cmp(&a.alpha) {
            Ordering::Equal => a.insert_sequence.cmp(&b.insert_sequence),
            other => other,
        });
        reranked.truncate(k);
        Ok(reranked)
    }

    fn sequence(&self, position: usize) -> u64 {
        self.entries[position].insert_sequence
    }

    /// Checks the incrementally maintained index against a from-scratch rebuild.
    pub fn verify(&self) -> Result<(), PoolError> {
        let rebuilt = Bm25Index::build(
            self.index.params(),
            self.entries.iter().map(|e| &e.source_tokens),
        );
        if let Some(diff) = self.index.diff(&rebuilt) {
            return Err(PoolError::IndexMismatch(diff));
        }
        let sequences: HashSet<u64> = self.entries.iter().map(|e| e.insert_sequence).collect();
        if sequences.len() != self.entries.len() {
            return Err(PoolError::IndexMismatch(
                "duplicate insert sequence numbers".into(),
            ));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.source_tokens != tokenize(&e.pair.source))
        {
            return Err(PoolError::IndexMismatch(format!(
                "stale tokens for entry {}",
                e.insert_sequence
            )));
        }
        Ok(())
    }

    pub fn stats(&self) -> PoolStats {
        let mut lengths: Vec<usize> = self.entries.iter().map(|e| e.source_tokens.len()).collect();
        lengths.sort_unstable();
        let n = lengths.len();
        PoolStats {
            size: n,
            vocabulary: self.index.document_frequencies.len(),
            mean_source_tokens: self.index.average_document_length(),
            min_source_tokens: lengths.first().copied().unwrap_or(0),
            max_source_tokens: lengths.last().copied().unwrap_or(0),
            median_source_tokens: if n == 0 { 0 } else { lengths[(n - 1) / 2] },
        }
    }

    /// Writes the pool atomically (temporary file, then rename).
    pub fn persist(&self, path: impl AsRef<Path>) -> Result<(), PoolError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let file = File::create(&tmp).map_err(io_error(&tmp))?;
            let mut out = BufWriter::new(file);
            let header = PoolHeader {
                schema_version: POOL_SCHEMA_VERSION,
                kind: POOL_KIND.to_string(),
                tokenizer: TOKENIZER_ID.to_string(),
                bm25: self.index.params(),
                document_count: self.entries.len(),
                next_sequence: self.next_sequence,
            };
            write_json_line(&mut out, &header).map_err(io_error(&tmp))?;
            for e in &self.entries {
                let stored = StoredEntry {
                    insert_sequence: e.insert_sequence,
                    source: e.pair.source.clone(),
                    target: e.pair.target.clone(),
                    provenance: e.pair.provenance,
                    origin_query: e.origin_query.clone(),
                };
                write_json_line(&mut out, &stored).map_err(io_error(&tmp))?;
            }
            out.flush().map_err(io_error(&tmp))?;
            out.get_ref().sync_all().map_err(io_error(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(io_error(path))
    }

    /// Reads a pool written by [`persist`](Self::persist) and rebuilds its
    /// index. An empty file is an empty pool.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoolError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = File::open(path).map_err(io_error(path))?;
        let malformed = |line: usize, message: String| PoolError::Malformed {
            path: display.clone(),
            line,
            message,
        };

        let mut lines = BufReader::new(file).lines().enumerate();
        let header: PoolHeader = loop {
            match lines.next() {
                None => return Ok(DemonstrationPool::default()),
                Some((i, line)) => {
                    let line = line.map_err(io_error(path))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let value: serde_json::Value = serde_json::from_str(&line)
                        .map_err(|e| malformed(i + 1, e.to_string()))?;
                    let found = value
                        .get("schema_version")
                        .and_then(serde_json::Value::as_u64)
                        .ok_or_else(|| malformed(i + 1, "missing schema_version header".into()))?;
                    if found != u64::from(POOL_SCHEMA_VERSION) {
                        return Err(PoolError::Version {
                            path: display.clone(),
                            found: found as u32,
                            expected: POOL_SCHEMA_VERSION,
                        });
                    }
                    break serde_json::from_value(value)
                        .map_err(|e| malformed(i + 1, e.to_string()))?;
                }
            }
        };
        if header.kind != POOL_KIND {
            return Err(malformed(1, format!("unexpected kind {:?}", header.kind)));
        }
        if header.tokenizer != TOKENIZER_ID {
            return Err(PoolError::Tokenizer {
                path: display,
                found: header.tokenizer,
                expected: TOKENIZER_ID.to_string(),
            });
        }

        let mut pool = DemonstrationPool::with_params(header.bm25);
        let mut seen = HashSet::new();
        for (i, line) in lines {
            let line = line.map_err(io_error(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let stored: StoredEntry =
                serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
            if !seen.insert(stored.insert_sequence) {
                return Err(malformed(
                    i + 1,
                    format!("duplicate insert_sequence {}", stored.insert_sequence),
                ));
            }
            let pair = DemonstrationPair::new(stored.source, stored.target, stored.provenance)
                .map_err(|e| malformed(i + 1, e.to_string()))?;
            let source_tokens = tokenize(&pair.source);
            if source_tokens.is_empty() {
                return Err(malformed(i + 1, "source has no tokens".into()));
            }
            pool.keys
                .entry((source_tokens.clone(), pair.target.clone()))
                .or_insert(stored.insert_sequence);
            pool.next_sequence = pool.next_sequence.max(stored.insert_sequence + 1);
            pool.push_entry(PoolEntry {
                pair,
                source_tokens,
                insert_sequence: stored.insert_sequence,
                origin_query: stored.origin_query,
            });
        }
        pool.next_sequence = pool.next_sequence.max(header.next_sequence);
        if pool.index.total_documents() != header.document_count {
            return Err(PoolError::CountMismatch {
                path: display,
                declared: header.document_count,
                found: pool.index.total_documents(),
            });
        }
        Ok(pool)
    }
}

fn write_json_line<T: Serialize>(out: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(s: &str, t: &str) -> DemonstrationPair {
        DemonstrationPair::new(s, t, Provenance::Generated).unwrap()
    }

    fn sample_pool() -> DemonstrationPool {
        let mut pool = DemonstrationPool::new();
        for (s, t) in [
            ("The lion sleeps tonight.", "L1"),
            ("A pride of lions hunts at dawn.", "L2"),
            ("Stock markets fell sharply.", "S1"),
            ("The weather is cold today.", "W1"),
        ] {
            pool.insert(pair(s, t), None).unwrap();
        }
        pool
    }

    #[test]
    fn self_retrieval_ranks_first() {
        let pool = sample_pool();
        let q = tokenize("Stock markets fell sharply.");
        let best = (0..pool.len())
            .max_by(|&a, &b| pool.bm25_score(&q, a).total_cmp(&pool.bm25_score(&q, b)))
            .unwrap();
        assert_eq!(best, 2);
        let got = pool.rbm25_retrieve("Stock markets fell sharply.", 100, 1).unwrap();
        assert_eq!(got[0].pair.target, "S1");
        assert_eq!(got[0].alpha, 1.0);
    }

    #[test]
    fn duplicate_insert_is_reported() {
        let mut pool = sample_pool();
        let out = pool.insert(pair("the LION sleeps tonight", "L1"), None).unwrap();
        assert_eq!(out, InsertOutcome::Duplicate { existing_sequence: 0 });
        assert_eq!(pool.len(), 4);
        // Same source, different target is kept.
        assert!(!pool
            .insert(pair("the lion sleeps tonight", "other"), None)
            .unwrap()
            .is_duplicate());
        assert_eq!(pool.len(), 5);
    }

    #[test]
    fn absent_terms_score_zero() {
        let pool = sample_pool();
        let q = tokenize("zebra giraffe");
        assert!((0..pool.len()).all(|i| pool.bm25_score(&q, i) == 0.0));
    }

    #[test]
    fn single_document_self_score_is_positive() {
        let mut pool = DemonstrationPool::new();
        pool.insert(pair("only one here", "x"), None).unwrap();
        assert!(pool.bm25_score(&tokenize("only one here"), 0) > 0.0);
    }

    #[test]
    fn disjoint_pool_falls_back_to_insertion_order() {
        let mut pool = DemonstrationPool::new();
        for (i, s) in ["red green", "blue yellow", "black white"].iter().enumerate() {
            pool.insert(pair(s, &format!("t{i}")), None).unwrap();
        }
        let got = pool.rbm25_retrieve("cats and dogs", 100, 3).unwrap();
        let seqs: Vec<u64> = got.iter().map(|r| r.insert_sequence).collect();
        assert_eq!(seqs, vec![0, 1, 2]);
        assert!(got.iter().all(|r| r.alpha == 0.0 && r.bm25 == 0.0));
    }

    #[test]
    fn retrieval_edges() {
        let pool = DemonstrationPool::new();
        assert!(pool.rbm25_retrieve("anything", 100, 4).unwrap().is_empty());
        assert!(matches!(
            pool.rbm25_retrieve("anything", 2, 4),
            Err(PoolError::InvalidDepth { k: 4, top_n: 2 })
        ));
        let pool = sample_pool();
        assert_eq!(pool.rbm25_retrieve("lion", 100, 10).unwrap().len(), 4);
    }

    #[test]
    fn empty_source_rejected() {
        let mut pool = DemonstrationPool::new();
        assert!(matches!(
            pool.insert(pair("?!", "x"), None),
            Err(PoolError::EmptySource(_))
        ));
    }

    #[test]
    fn persist_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        let mut pool = sample_pool();
        pool.insert(pair("Origin tracked.", "O"), Some("q1".into()))
            .unwrap();
        pool.persist(&path).unwrap();
        let loaded = DemonstrationPool::load(&path).unwrap();
        assert_eq!(loaded, pool);
        loaded.verify().unwrap();
        assert_eq!(
            loaded.entries()[4].origin_query.as_deref(),
            Some("q1")
        );
    }

    #[test]
    fn empty_file_is_empty_pool() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(DemonstrationPool::load(&path).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        sample_pool().persist(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = &text[..text.len() - 10];
        std::fs::write(&path, cut).unwrap();
        match DemonstrationPool::load(&path) {
            Err(PoolError::Malformed { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_count_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        sample_pool().persist(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        std::fs::write(&path, text.replace("\"schema_version\":1", "\"schema_version\":9")).unwrap();
        assert!(matches!(
            DemonstrationPool::load(&path),
            Err(PoolError::Version { found: 9, .. })
        ));

        let dropped: Vec<&str> = text.lines().take(4).collect();
        std::fs::write(&path, dropped.join("\n")).unwrap();
        assert!(matches!(
            DemonstrationPool::load(&path),
            Err(PoolError::CountMismatch { declared: 4, found: 3, .. })
        ));
    }

    #[test]
    fn insert_after_load_continues_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.jsonl");
        sample_pool().persist(&path).unwrap();
        let mut pool = DemonstrationPool::load(&path).unwrap();
        let out = pool.insert(pair("fresh sentence", "F"), None).unwrap();
        assert_eq!(out, InsertOutcome::Inserted { insert_sequence: 4 });
        pool.verify().unwrap();
    }

    #[test]
    fn stats_summary() {
        let s = sample_pool().stats();
        assert_eq!(s.size, 4);
        assert_eq!(s.min_source_tokens, 4);
        assert_eq!(s.max_source_tokens, 7);
    }
}
