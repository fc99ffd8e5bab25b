//! Diagnostics over translation records: how relevant the demonstrations
//! are to their query, how uniform they are among themselves, and output
//! length statistics. Quality estimation and language identification need
//! external models and plug in through [`QualityScorer`] and
//! [`LanguageDetector`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pipeline::TranslationRecord;
use crate::text::{alpha, tokenize, TokenSequence};

/// A relevance or uniformity figure, reported both raw and scaled by 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    /// Mean in `[0, 1]`; `None` when no record qualified.
    pub raw: Option<f64>,
    /// `raw * 100`.
    pub scaled: Option<f64>,
    pub included: usize,
    pub excluded: usize,
}

impl MetricValue {
    fn from_means(means: &[f64], excluded: usize) -> Self {
        let raw = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
        MetricValue {
            raw,
            scaled: raw.map(|r| r * 100.0),
            included: means.len(),
            excluded,
        }
    }
}

fn sources(record: &TranslationRecord) -> Vec<TokenSequence> {
    record
        .demonstrations_used
        .iter()
        .map(|d| tokenize(&d.source))
        .collect()
}

/// Mean `alpha(query, source)` over a record's demonstrations; `None`
/// without demonstrations.
pub fn record_relevance(record: &TranslationRecord) -> Option<f64> {
    let demos = sources(record);
    if demos.is_empty() {
        return None;
    }
    let q = tokenize(&record.query);
    Some(demos.iter().map(|x| alpha(&q, x).get()).sum::<f64>() / demos.len() as f64)
}

/// Mean `alpha(x_i, x_j)` over ordered pairs `i != j` of a record's
/// demonstration sources; `None` with fewer than two.
pub fn record_uniformity(record: &TranslationRecord) -> Option<f64> {
    let demos = sources(record);
    if demos.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, a) in demos.iter().enumerate() {
        for (j, b) in demos.iter().enumerate() {
            if i != j {
                sum += alpha(a, b).get();
                count += 1;
            }
        }
    }
    Some(sum / count as f64)
}

pub fn relevance_metric(records: &[TranslationRecord]) -> MetricValue {
    aggregate(records, record_relevance)
}

pub fn uniformity_metric(records: &[TranslationRecord]) -> MetricValue {
    aggregate(records, record_uniformity)
}

fn aggregate(
    records: &[TranslationRecord],
    per_record: impl Fn(&TranslationRecord) -> Option<f64>,
) -> MetricValue {
    let means: Vec<f64> = records.iter().filter_map(&per_record).collect();
    MetricValue::from_means(&means, records.len() - means.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: usize,
    pub p25: usize,
    pub median: usize,
    pub p75: usize,
    pub p90: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthStats {
    pub records: usize,
    pub excluded: usize,
    pub mean_tokens: f64,
    pub quantiles: Quantiles,
    pub repeated_count: usize,
    pub repeated_rate: f64,
}

/// True when some token 4-gram occurs at least three times back to back.
pub fn has_repeated_ngram(tokens: &TokenSequence) -> bool {
    const N: usize = 4;
    const RUNS: usize = 3;
    let t = tokens.as_slice();
    if t.len() < N * RUNS {
        return false;
    }
    (0..=t.len() - N * RUNS).any(|i| (1..RUNS).all(|r| t[i..i + N] == t[i + r * N..i + (r + 1) * N]))
}

fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn length_stats(records: &[TranslationRecord]) -> LengthStats {
    let token_lists: Vec<TokenSequence> = records
        .iter()
        .filter_map(|r| r.hypothesis.as_deref().map(tokenize))
        .collect();
    let mut counts: Vec<usize> = token_lists.iter().map(TokenSequence::len).collect();
    let repeated_count = token_lists.iter().filter(|t| has_repeated_ngram(t)).count();
    let n = counts.len();
    counts.sort_unstable();
    if n == 0 {
        return LengthStats {
            excluded: records.len(),
            ..Default::default()
        };
    }
    LengthStats {
        records: n,
        excluded: records.len() - n,
        mean_tokens: counts.iter().sum::<usize>() as f64 / n as f64,
        quantiles: Quantiles {
            min: counts[0],
            p25: nearest_rank(&counts, 0.25),
            median: nearest_rank(&counts, 0.5),
            p75: nearest_rank(&counts, 0.75),
            p90: nearest_rank(&counts, 0.9),
            max: counts[n - 1],
        },
        repeated_count,
        repeated_rate: repeated_count as f64 / n as f64,
    }
}

/// Reference-free quality estimate for demonstration pairs.
pub trait QualityScorer {
    /// One score per `(source, target)` pair, in order.
    fn score(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, String>;
}

/// Identifies the language of a text, e.g. with an external classifier.
pub trait LanguageDetector {
    fn detect(&self, text: &str) -> Option<String>;
}

/// Share of hypotheses whose detected language is not `expected`.
/// Undetectable hypotheses count as off-target.
pub fn off_target_rate(
    records: &[TranslationRecord],
    detector: &dyn LanguageDetector,
    expected: &str,
) -> Option<f64> {
    let hyps: Vec<&str> = records.iter().filter_map(|r| r.hypothesis.as_deref()).collect();
    if hyps.is_empty() {
        return None;
    }
    let off = hyps
        .iter()
        .filter(|h| {
            detector
                .detect(h)
                .is_none_or(|lang| !lang.eq_ignore_ascii_case(expected))
        })
        .count();
    Some(off as f64 / hyps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum QualityStatus {
    NotRequested,
    Scored { mean: f64, pairs: usize },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    pub index: usize,
    pub query: String,
    pub demonstrations: usize,
    pub relevance: Option<f64>,
    pub uniformity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSetReport {
    pub label: String,
    pub records: usize,
    pub relevance: MetricValue,
    pub uniformity: MetricValue,
    pub quality: QualityStatus,
    pub length: LengthStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_target_rate: Option<f64>,
    /// Number of records per demonstration count.
    pub example_count_histogram: BTreeMap<usize, usize>,
    pub per_query: Vec<PerQuery>,
}

/// Every demonstration pair of every record, in record order.
pub fn demonstration_pairs(records: &[TranslationRecord]) -> Vec<(String, String)> {
    records
        .iter()
        .flat_map(|r| {
            r.demonstrations_used
                .iter()
                .map(|d| (d.source.clone(), d.target.clone()))
        })
        .collect()
}

pub fn build_report(
    label: &str,
    records: &[TranslationRecord],
    quality: Option<&dyn QualityScorer>,
) -> ExampleSetReport {
    let quality = match quality {
        None => QualityStatus::NotRequested,
        Some(scorer) => {
            let pairs = demonstration_pairs(records);
            match scorer.score(&pairs) {
                Ok(scores) if scores.len() != pairs.len() => QualityStatus::Failed {
                    reason: format!("scorer returned {} scores for {} pairs", scores.len(), pairs.len()),
                },
                Ok(scores) if scores.is_empty() => QualityStatus::Failed {
                    reason: "no demonstration pairs to score".into(),
                },
                Ok(scores) => QualityStatus::Scored {
                    mean: scores.iter().sum::<f64>() / scores.len() as f64,
                    pairs: scores.len(),
                },
                Err(reason) => QualityStatus::Failed { reason },
            }
        }
    };
    let mut histogram = BTreeMap::new();
    for r in records {
        *histogram.entry(r.demonstrations_used.len()).or_insert(0) += 1;
    }
    ExampleSetReport {
        label: label.to_string(),
        records: records.len(),
        relevance: relevance_metric(records),
        uniformity: uniformity_metric(records),
        quality,
        length: length_stats(records),
        off_target_rate: None,
        example_count_histogram: histogram,
        per_query: records
            .iter()
            .map(|r| PerQuery {
                index: r.index,
                query: r.query.clone(),
                demonstrations: r.demonstrations_used.len(),
                relevance: record_relevance(r),
                uniformity: record_uniformity(r),
            })
            .collect(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "n/a".into())
}

/// Aligned plain-text table: one row per report with Relev., Uni. and
/// Qual. columns, followed by output length statistics.
pub fn render_table(reports: &[ExampleSetReport]) -> String {
    let width = reports
        .iter()
        .map(|r| r.label.chars().count())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "Method", "Relev.", "Uni.", "Qual.");
    for r in reports {
        let qual = match &r.quality {
            QualityStatus::NotRequested => "n/a".to_string(),
            QualityStatus::Scored { mean, .. } => format!("{mean:.1}"),
            QualityStatus::Failed { .. } => "failed".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            r.label,
            cell(r.relevance.scaled),
            cell(r.uniformity.scaled),
            qual
        );
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>9}",
        "Method", "Outputs", "Tokens", "Median", "Max", "Repeated"
    );
    for r in reports {
        let l = &r.length;
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7.1}  {:>7}  {:>7}  {:>8.1}%",
            r.label,
            l.records,
            l.mean_tokens,
            l.quantiles.median,
            l.quantiles.max,
            l.repeated_rate * 100.0
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{DemonstrationPair, Provenance};
    use crate::pipeline::Mode;

    fn record(query: &str, demos: &[&str], hypothesis: Option<&str>) -> TranslationRecord {
        let json = serde_json::json!({
            "schema_version": 1,
            "index": 0,
            "query": query,
            "mode": "dat",
            "hypothesis": hypothesis,
            "demonstrations_used": demos
                .iter()
                .map(|s| DemonstrationPair::new(*s, "t", Provenance::Generated).unwrap())
                .collect::<Vec<_>>(),
            "exchanges": [],
        });
        let r: TranslationRecord = serde_json::from_value(json).unwrap();
        assert_eq!(r.mode, Mode::Dat);
        r
    }

    #[test]
    fn relevance_ceiling_and_floor() {
        let q = "the lion sleeps tonight";
        let recs = vec![record(q, &[q, q], None)];
        assert_eq!(relevance_metric(&recs).scaled, Some(100.0));
        let recs = vec![record(q, &["cats purr", "dogs bark loudly"], None)];
        assert_eq!(relevance_metric(&recs).scaled, Some(0.0));
    }

    #[test]
    fn exclusion_accounting() {
        let recs = vec![
            record("a b c d", &[], None),
            record("a b c d", &["a b c d"], None),
            record("a b c d", &["a b", "c d"], None),
        ];
        let rel = relevance_metric(&recs);
        assert_eq!((rel.included, rel.excluded), (2, 1));
        let uni = uniformity_metric(&recs);
        assert_eq!((uni.included, uni.excluded), (1, 2));
        assert_eq!(uni.included + uni.excluded, recs.len());
        assert_eq!(uni.raw, Some(0.0));
    }

    #[test]
    fn uniformity_ceiling() {
        let s = "one two three four five";
        assert_eq!(uniformity_metric(&[record("q", &[s, s, s], None)]).scaled, Some(100.0));
    }

    #[test]
    fn repeated_detector() {
        assert!(has_repeated_ngram(&tokenize(&"x y z w ".repeat(5))));
        assert!(!has_repeated_ngram(&tokenize(&"x y z w ".repeat(2))));
        assert!(!has_repeated_ngram(&tokenize("a b c d e f g h i j k l m")));
        // Three runs starting mid-sentence.
        assert!(has_repeated_ngram(&tokenize("start a b c d a b c d a b c d end")));
    }

    #[test]
    fn length_statistics() {
        let recs = vec![
            record("q", &[], Some("a b c")),
            record("q", &[], Some("a b c d e")),
            record("q", &[], None),
            record("q", &[], Some("x y z w ".repeat(5).as_str())),
        ];
        let s = length_stats(&recs);
        assert_eq!(s.records, 3);
        assert_eq!(s.excluded, 1);
        assert_eq!(s.mean_tokens, (3.0 + 5.0 + 20.0) / 3.0);
        assert_eq!(s.quantiles.min, 3);
        assert_eq!(s.quantiles.median, 5);
        assert_eq!(s.quantiles.max, 20);
        assert_eq!(s.repeated_count, 1);
        assert_eq!(length_stats(&[record("q", &[], Some("a b c"))]).mean_tokens, 3.0);
    }

    struct Fixed(Result<Vec<f64>, String>);
    impl QualityScorer for Fixed {
        fn score(&self, _: &[(String, String)]) -> Result<Vec<f64>, String> {
            self.0.clone()
        }
    }

    #[test]
    fn report_and_table() {
        let recs = vec![record("a b c d", &["a b c d", "e f"], Some("out"))];
        let report = build_report("dat", &recs, None);
        assert_eq!(report.quality, QualityStatus::NotRequested);
        assert_eq!(report.example_count_histogram.get(&2), Some(&1));
        let table = render_table(&[report]);
        let first_row = table.lines().nth(1).unwrap();
        assert!(first_row.starts_with("dat"));
        assert!(first_row.trim_end().ends_with("n/a"));

        let scored = build_report("dat", &recs, Some(&Fixed(Ok(vec![0.5, 0.7]))));
        match scored.quality {
            QualityStatus::Scored { mean, pairs } => {
                assert!((mean - 0.6).abs() < 1e-12);
                assert_eq!(pairs, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
        let failed = build_report("dat", &recs, Some(&Fixed(Err("boom".into()))));
        assert!(render_table(&[failed]).contains("failed"));
        let short = build_report("dat", &recs, Some(&Fixed(Ok(vec![0.5]))));
        assert!(matches!(short.quality, QualityStatus::Failed { .. }));
    }

    struct Always(&'static str);
    impl LanguageDetector for Always {
        fn detect(&self, _: &str) -> Option<String> {
            Some(self.0.into())
        }
    }

    #[test]
    fn off_target() {
        let recs = vec![record("q", &[], Some("a")), record("q", &[], Some("b"))];
        assert_eq!(off_target_rate(&recs, &Always("khmer"), "Khmer"), Some(0.0));
        assert_eq!(off_target_rate(&recs, &Always("english"), "Khmer"), Some(1.0));
        assert_eq!(off_target_rate(&[], &Always("x"), "Khmer"), None);
    }
}
