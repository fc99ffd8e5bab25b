//! Query translation under the five experimental configurations, batch
//! runs over query files, and the seed/eval accumulation protocol.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::gateway::{ChatExchange, Gateway, GenerationParams};
use crate::generation::{DemonstrationPair, GenerationError, Generator, Provenance};
use crate::mmr::{FilterConfig, SelectionTrace};
use crate::pool::{DemonstrationPool, PoolError, DEFAULT_TOP_N};
use crate::prompt::{LanguagePair, Templates};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SHOTS: usize = 4;

pub type SharedPool = Arc<RwLock<DemonstrationPool>>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

impl PipelineError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    FewShotFixed,
    Dat,
    DatFixed,
    DatAccumulate,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::ZeroShot,
        Mode::FewShotFixed,
        Mode::Dat,
        Mode::DatFixed,
        Mode::DatAccumulate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ZeroShot => "zero_shot",
            Mode::FewShotFixed => "few_shot_fixed",
            Mode::Dat => "dat",
            Mode::DatFixed => "dat_fixed",
            Mode::DatAccumulate => "dat_accumulate",
        }
    }

    pub fn requires_fixed_pairs(self) -> bool {
        matches!(self, Mode::FewShotFixed | Mode::DatFixed)
    }

    pub fn generates(self) -> bool {
        matches!(self, Mode::Dat | Mode::DatFixed)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().replace('-', "_").as_str() {
            "zero_shot" => Ok(Mode::ZeroShot),
            "few_shot" | "few_shot_fixed" => Ok(Mode::FewShotFixed),
            "dat" => Ok(Mode::Dat),
            "dat_fixed" => Ok(Mode::DatFixed),
            "dat_accumulate" => Ok(Mode::DatAccumulate),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub filter: FilterConfig,
    pub langs: LanguagePair,
    pub fixed_pairs: Option<Vec<DemonstrationPair>>,
    pub pool: Option<SharedPool>,
    /// Demonstrations placed in the final query prompt.
    pub shot_count: usize,
    /// BM25 shortlist size for pool retrieval.
    pub top_n: usize,
    pub params: GenerationParams,
    pub templates: Templates,
}

impl PipelineConfig {
    pub fn new(mode: Mode, langs: LanguagePair) -> Self {
        PipelineConfig {
            mode,
            filter: FilterConfig::default(),
            langs,
            fixed_pairs: None,
            pool: None,
            shot_count: DEFAULT_SHOTS,
            top_n: DEFAULT_TOP_N,
            params: GenerationParams::default(),
            templates: Templates::default(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.filter.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.params.validate() {
            return bad(e.to_string());
        }
        if self.shot_count == 0 {
            return bad("shot count must be positive".into());
        }
        if self.mode.requires_fixed_pairs()
            && self.fixed_pairs.as_ref().is_none_or(|p| p.is_empty())
        {
            return bad(format!("mode {} requires fixed pairs", self.mode));
        }
        if self.mode == Mode::DatAccumulate && self.pool.is_none() {
            return bad("mode dat_accumulate requires a demonstration pool".into());
        }
        if self.mode.generates() && self.filter.k() > self.shot_count {
            return bad(format!(
                "k={} generated demonstrations exceed the shot count {}",
                self.filter.k(),
                self.shot_count
            ));
        }
        if self.mode == Mode::DatAccumulate && self.shot_count > self.top_n {
            return bad(format!(
                "shot count {} exceeds the retrieval shortlist {}",
                self.shot_count, self.top_n
            ));
        }
        if self.langs.source.trim().is_empty() || self.langs.target.trim().is_empty() {
            return bad("source and target language names must be non-empty".into());
        }
        Ok(())
    }

    fn generator<'a>(&'a self, gateway: &'a dyn Gateway) -> Generator<'a> {
        Generator {
            gateway,
            templates: &self.templates,
            params: &self.params,
            langs: &self.langs,
        }
    }
}

/// Wall-clock time per stage for one query.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTiming {
    pub source_generation: Duration,
    pub filtering: Duration,
    pub target_generation: Duration,
    pub retrieval: Duration,
    pub final_translation: Duration,
    pub total: Duration,
}

/// Result of translating one query. Timing stays in memory only, so
/// record files are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub schema_version: u32,
    pub index: usize,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub mode: Mode,
    pub hypothesis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub demonstrations_used: Vec<DemonstrationPair>,
    /// Parsed candidate sources, in generation order (generating modes only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_trace: Option<SelectionTrace>,
    #[serde(default)]
    pub filtering_bypassed: bool,
    #[serde(default)]
    pub shortfall: bool,
    #[serde(default)]
    pub empty_pool_fallback: bool,
    pub exchanges: Vec<ChatExchange>,
    #[serde(skip)]
    pub timing: StageTiming,
}

impl TranslationRecord {
    fn start(index: usize, query: &str, reference: Option<String>, mode: Mode) -> Self {
        TranslationRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            index,
            query: query.to_string(),
            reference,
            mode,
            hypothesis: None,
            error: None,
            demonstrations_used: Vec::new(),
            candidates: Vec::new(),
            selection_trace: None,
            filtering_bypassed: false,
            shortfall: false,
            empty_pool_fallback: false,
            exchanges: Vec::new(),
            timing: StageTiming::default(),
        }
    }

    pub fn succeeded(&self) -> bool {
        self.hypothesis.is_some()
    }

    /// Prompt text of the final query translation call, if it was issued.
    pub fn final_prompt(&self) -> Option<&str> {
        if self.hypothesis.is_none() {
            return None;
        }
        self.exchanges
            .last()
            .and_then(|e| e.messages.last())
            .map(|m| m.content.as_str())
    }
}

/// One line of batch input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl BatchItem {
    pub fn new(query: impl Into<String>) -> Self {
        BatchItem {
            query: query.into(),
            reference: None,
        }
    }
}

/// Reads one query per line, or `query<TAB>reference` pairs.
pub fn read_queries(path: impl AsRef<Path>) -> Result<Vec<BatchItem>, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(PipelineError::io(path))?;
    BufReader::new(file)
        .lines()
        .map(|line| {
            let line = line.map_err(PipelineError::io(path))?;
            let line = line.strip_suffix('\r').unwrap_or(&line);
            Ok(match line.split_once('\t') {
                Some((q, r)) => BatchItem {
                    query: q.to_string(),
                    reference: Some(r.to_string()),
                },
                None => BatchItem::new(line),
            })
        })
        .collect()
}

/// Translates one query. Only configuration problems are returned as
/// errors; runtime failures land in the record's `error` field.
pub fn translate(
    query: &str,
    config: &PipelineConfig,
    gateway: &dyn Gateway,
) -> Result<TranslationRecord, PipelineError> {
    config.validate()?;
    Ok(translate_item(0, &BatchItem::new(query), config, gateway))
}

fn translate_item(
    index: usize,
    item: &BatchItem,
    config: &PipelineConfig,
    gateway: &dyn Gateway,
) -> TranslationRecord {
    let started = Instant::now();
    let mut record = TranslationRecord::start(index, &item.query, item.reference.clone(), config.mode);
    if item.query.trim().is_empty() {
        record.error = Some("validation: empty query".into());
        return record;
    }
    if let Err(e) = run_modes(&mut record, config, gateway) {
        record.error = Some(e.to_string());
        record.hypothesis = None;
    }
    record.timing.total = started.elapsed();
    record
}

fn run_modes(
    record: &mut TranslationRecord,
    config: &PipelineConfig,
    gateway: &dyn Gateway,
) -> Result<(), GenerationError> {
    let generator = config.generator(gateway);
    let query = record.query.clone();
    let demonstrations: Vec<DemonstrationPair> = match config.mode {
        Mode::ZeroShot => Vec::new(),
        Mode::FewShotFixed => config
            .fixed_pairs
            .iter()
            .flatten()
            .take(config.shot_count)
            .cloned()
            .collect(),
        Mode::Dat | Mode::DatFixed => {
            let fixed = match config.mode {
                Mode::DatFixed => config.fixed_pairs.as_deref(),
                _ => None,
            };
            let set = generator.build_demonstrations(&query, &config.filter, fixed)?;
            record.candidates = set.candidates.iter().map(|c| c.text.clone()).collect();
            record.selection_trace = set.trace;
            record.filtering_bypassed = set.filtering_bypassed;
            record.shortfall = set.shortfall;
            record.exchanges = set.exchanges;
            record.timing.source_generation = set.timing.source_generation;
            record.timing.filtering = set.timing.filtering;
            record.timing.target_generation = set.timing.target_generation;
            set.pairs
        }
        Mode::DatAccumulate => {
            let started = Instant::now();
            let pool = config
                .pool
                .as_ref()
                .expect("validated: accumulate mode has a pool")
                .read()
                .unwrap_or_else(|p| p.into_inner());
            let retrieved = pool
                .rbm25_retrieve(&query, config.top_n, config.shot_count)
                .map_err(|e| GenerationError::InvalidPair(e.to_string()))?;
            drop(pool);
            record.timing.retrieval = started.elapsed();
            if retrieved.is_empty() {
                warn!(query = %query, "demonstration pool is empty, translating zero-shot");
                record.empty_pool_fallback = true;
            }
            retrieved
                .into_iter()
                .map(|r| DemonstrationPair {
                    provenance: Provenance::Pooled,
                    ..r.pair
                })
                .collect()
        }
    };

    let started = Instant::now();
    let messages = config
        .templates
        .translation_messages(&query, &demonstrations, &config.langs)?;
    record.demonstrations_used = demonstrations;
    let exchange = gateway.complete(&messages, &config.params)?;
    let hypothesis = exchange.response_text.trim().to_string();
    record.exchanges.push(exchange);
    record.timing.final_translation = started.elapsed();
    if hypothesis.is_empty() {
        return Err(GenerationError::EmptyTranslation { sentence: query });
    }
    record.hypothesis = Some(hypothesis);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    /// Queries translated concurrently.
    pub parallelism: usize,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions { parallelism: 1 }
    }
}

/// Mean wall-clock milliseconds per stage over the records of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub source_generation_ms: f64,
    pub filtering_ms: f64,
    pub target_generation_ms: f64,
    pub retrieval_ms: f64,
    pub final_translation_ms: f64,
    pub total_ms: f64,
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub validation_errors: usize,
    pub demonstrations: usize,
    pub shortfall_records: usize,
    pub filtering_bypassed_records: usize,
    pub empty_pool_fallbacks: usize,
    pub gateway_calls: u64,
    pub timing: TimingSummary,
}

#[derive(Default)]
struct SummaryBuilder {
    summary: BatchSummary,
    sums: [Duration; 6],
}

impl SummaryBuilder {
    fn add(&mut self, r: &TranslationRecord) {
        let s = &mut self.summary;
        s.total += 1;
        if r.succeeded() {
            s.succeeded += 1;
        } else {
            s.failed += 1;
            if r.error.as_deref().is_some_and(|e| e.starts_with("validation:")) {
                s.validation_errors += 1;
            }
        }
        s.demonstrations += r.demonstrations_used.len();
        s.shortfall_records += usize::from(r.shortfall);
        s.filtering_bypassed_records += usize::from(r.filtering_bypassed);
        s.empty_pool_fallbacks += usize::from(r.empty_pool_fallback);
        let t = &r.timing;
        for (sum, d) in self.sums.iter_mut().zip([
            t.source_generation,
            t.filtering,
            t.target_generation,
            t.retrieval,
            t.final_translation,
            t.total,
        ]) {
            *sum += d;
        }
    }

    fn finish(mut self, calls: u64, wall: Duration) -> BatchSummary {
        let n = self.summary.total.max(1) as f64;
        let ms = |d: Duration| d.as_secs_f64() * 1000.0 / n;
        self.summary.gateway_calls = calls;
        self.summary.timing = TimingSummary {
            source_generation_ms: ms(self.sums[0]),
            filtering_ms: ms(self.sums[1]),
            target_generation_ms: ms(self.sums[2]),
            retrieval_ms: ms(self.sums[3]),
            final_translation_ms: ms(self.sums[4]),
            total_ms: ms(self.sums[5]),
            wall_clock_ms: wall.as_secs_f64() * 1000.0,
        };
        self.summary
    }
}

/// Translates `items` with up to `options.parallelism` workers and hands
/// every record to `sink` in input order. Record indices start at
/// `first_index`.
pub fn run_batch_with<F>(
    items: &[BatchItem],
    first_index: usize,
    config: &PipelineConfig,
    gateway: &dyn Gateway,
    options: BatchOptions,
    mut sink: F,
) -> Result<BatchSummary, PipelineError>
where
    F: FnMut(&TranslationRecord) -> Result<(), PipelineError>,
{
    config.validate()?;
    let started = Instant::now();
    let calls_before = gateway.calls();
    let workers = options.parallelism.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let mut builder = SummaryBuilder::default();

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, TranslationRecord)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let record = translate_item(first_index + i, item, config, gateway);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut next_out = 0usize;
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&next_out) {
                builder.add(&record);
                if let Err(e) = sink(&record) {
                    // Stop handing out work; workers drain on their own.
                    next.store(items.len(), Ordering::Relaxed);
                    return Err(e);
                }
                next_out += 1;
            }
        }
        Ok(())
    })?;

    let summary = builder.finish(gateway.calls() - calls_before, started.elapsed());
    info!(
        total = summary.total,
        failed = summary.failed,
        calls = summary.gateway_calls,
        "batch finished"
    );
    Ok(summary)
}

/// Newline-delimited JSON writer for translation records.
pub struct RecordWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl RecordWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(PipelineError::io(&path))?;
        Ok(RecordWriter {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, record: &TranslationRecord) -> Result<(), PipelineError> {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(PipelineError::io(&self.path))
    }

    pub fn finish(mut self) -> Result<(), PipelineError> {
        self.out.flush().map_err(PipelineError::io(&self.path))
    }
}

/// Runs a batch and streams records to `output_path` in input order.
pub fn run_batch(
    items: &[BatchItem],
    config: &PipelineConfig,
    gateway: &dyn Gateway,
    output_path: impl AsRef<Path>,
    options: BatchOptions,
) -> Result<BatchSummary, PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::Config("no queries to translate".into()));
    }
    config.validate()?;
    let mut writer = RecordWriter::create(output_path)?;
    let summary = run_batch_with(items, 0, config, gateway, options, |r| writer.write(r))?;
    writer.finish()?;
    Ok(summary)
}

/// Reads a record file written by [`run_batch`].
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<TranslationRecord>, PipelineError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(PipelineError::io(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(PipelineError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TranslationRecord = serde_json::from_str(&line).map_err(|e| PipelineError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("record on line {}: {e}", i + 1),
            ),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Evaluation of the eval queries against the pool built from one seed prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub seed_prefix: usize,
    pub pool_size: usize,
    pub summary: BatchSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulationOutcome {
    pub seed_summary: BatchSummary,
    /// Pairs generated for seed queries, summed over their records.
    pub seed_pairs: usize,
    pub inserted: usize,
    pub duplicates: usize,
    pub pool_size: usize,
    pub points: Vec<SweepPoint>,
}

/// Where accumulation runs write their records.
pub trait AccumulationSink {
    fn seed_record(&mut self, record: &TranslationRecord) -> Result<(), PipelineError>;
    fn eval_record(&mut self, prefix: usize, record: &TranslationRecord) -> Result<(), PipelineError>;
}

/// Generates demonstrations for the seed queries (in prefix chunks),
/// inserting every generated pair into `pool` in seed order, and after each
/// prefix evaluates all eval queries in `dat_accumulate` mode against the
/// pool as it stands. The pool is never written during evaluation.
///
/// `prefixes` must be ascending and at most `seed.len()`; an empty list
/// means a single evaluation after all seed queries.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_then_evaluate(
    seed: &[BatchItem],
    eval: &[BatchItem],
    prefixes: &[usize],
    config: &PipelineConfig,
    gateway: &dyn Gateway,
    pool: SharedPool,
    options: BatchOptions,
    sink: &mut dyn AccumulationSink,
) -> Result<AccumulationOutcome, PipelineError> {
    let seed_queries: HashSet<&str> = seed.iter().map(|i| i.query.as_str()).collect();
    if let Some(overlap) = eval.iter().find(|i| seed_queries.contains(i.query.as_str())) {
        return Err(PipelineError::Config(format!(
            "seed and eval queries overlap: {:?}",
            overlap.query
        )));
    }
    let prefixes: Vec<usize> = if prefixes.is_empty() {
        vec![seed.len()]
    } else {
        prefixes.to_vec()
    };
    if prefixes.windows(2).any(|w| w[0] >= w[1]) || prefixes.iter().any(|&p| p > seed.len()) {
        return Err(PipelineError::Config(format!(
            "seed prefixes {prefixes:?} must be strictly ascending and at most {}",
            seed.len()
        )));
    }

    let mut seed_config = config.clone();
    seed_config.mode = if config.fixed_pairs.as_ref().is_some_and(|p| !p.is_empty()) {
        Mode::DatFixed
    } else {
        Mode::Dat
    };
    seed_config.pool = None;
    let mut eval_config = config.clone();
    eval_config.mode = Mode::DatAccumulate;
    eval_config.pool = Some(Arc::clone(&pool));
    seed_config.validate()?;
    eval_config.validate()?;

    let mut seed_summary = SummaryBuilder::default();
    let mut seed_calls = 0;
    let mut seed_pairs = 0;
    let mut inserted = 0;
    let mut duplicates = 0;
    let mut points = Vec::with_capacity(prefixes.len());
    let mut done = 0usize;

    for &prefix in &prefixes {
        let chunk = &seed[done..prefix];
        if !chunk.is_empty() {
            let summary = run_batch_with(chunk, done, &seed_config, gateway, options, |record| {
                seed_summary.add(record);
                seed_pairs += record.demonstrations_used.len();
                let mut guard = pool.write().unwrap_or_else(|p| p.into_inner());
                for pair in &record.demonstrations_used {
                    if guard.insert(pair.clone(), Some(record.query.clone()))?.is_duplicate() {
                        duplicates += 1;
                    } else {
                        inserted += 1;
                    }
                }
                drop(guard);
                sink.seed_record(record)
            })?;
            seed_calls += summary.gateway_calls;
        }
        done = prefix;

        let pool_size = pool.read().unwrap_or_else(|p| p.into_inner()).len();
        info!(seed_prefix = prefix, pool_size, "evaluating against accumulated pool");
        let summary = if eval.is_empty() {
            BatchSummary::default()
        } else {
            run_batch_with(eval, 0, &eval_config, gateway, options, |record| {
                sink.eval_record(prefix, record)
            })?
        };
        points.push(SweepPoint {
            seed_prefix: prefix,
            pool_size,
            summary,
        });
    }

    Ok(AccumulationOutcome {
        seed_summary: seed_summary.finish(seed_calls, Duration::ZERO),
        seed_pairs,
        inserted,
        duplicates,
        pool_size: pool.read().unwrap_or_else(|p| p.into_inner()).len(),
        points,
    })
}
