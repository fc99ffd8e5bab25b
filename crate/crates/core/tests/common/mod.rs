//! Brute-force reference implementations shared by the integration suites.
#![allow(dead_code)]

use dat_core::text::TokenSequence;
use dat_core::tokenize;

pub fn seq(words: &[String]) -> TokenSequence {
    tokenize(&words.join(" "))
}

/// Every length-`n` window of `tokens`, in order, including repeats.
pub fn windows(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut start = 0;
    while start + n <= tokens.len() {
        out.push(tokens[start..start + n].to_vec());
        start += 1;
    }
    out
}

/// Clipped matches by greedy one-to-one pairing of identical windows.
pub fn oracle_recall_counts(q: &[String], x: &[String], n: usize) -> (usize, usize) {
    let qw = windows(q, n);
    let mut unused = windows(x, n);
    let mut matched = 0;
    for w in &qw {
        if let Some(pos) = unused.iter().position(|u| u == w) {
            unused.swap_remove(pos);
            matched += 1;
        }
    }
    (matched, qw.len())
}

pub fn oracle_recall(q: &[String], x: &[String], n: usize) -> f64 {
    match oracle_recall_counts(q, x, n) {
        (_, 0) => 0.0,
        (m, t) => m as f64 / t as f64,
    }
}

pub fn oracle_alpha(q: &[String], x: &[String]) -> f64 {
    let mut sum = 0.0;
    for n in 1..=4 {
        sum += oracle_recall(q, x, n);
    }
    sum / 4.0
}

/// Greedy selection written step by step: score every unselected
/// candidate, keep the first strictly best one, repeat.
pub fn oracle_mmr(q: &[String], cands: &[Vec<String>], k: usize, lambda: f64) -> Vec<usize> {
    let mut selected: Vec<usize> = Vec::new();
    while selected.len() < k.min(cands.len()) {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..cands.len() {
            if selected.contains(&i) {
                continue;
            }
            let relevance = oracle_alpha(q, &cands[i]);
            let diversity = if selected.is_empty() {
                0.0
            } else {
                let mut total = 0.0;
                for &s in &selected {
                    total += oracle_alpha(&cands[s], &cands[i]);
                }
                -(total / selected.len() as f64)
            };
            let objective = relevance + lambda * diversity;
            match best {
                Some((_, b)) if objective <= b => {}
                _ => best = Some((i, objective)),
            }
        }
        selected.push(best.unwrap().0);
    }
    selected
}

pub const K1: f64 = 1.5;
pub const B: f64 = 0.75;

/// Okapi BM25 computed from raw documents on every call.
pub fn oracle_bm25(docs: &[Vec<String>], query: &[String], d: usize) -> f64 {
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|x| x.len()).sum::<usize>() as f64 / n;
    let dl = docs[d].len() as f64;
    let mut score = 0.0;
    for term in query {
        let tf = docs[d].iter().filter(|t| *t == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let df = docs.iter().filter(|doc| doc.contains(term)).count() as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        score += idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * dl / avgdl));
    }
    score
}

/// Full-scan two-stage retrieval returning document positions.
pub fn oracle_rbm25(docs: &[Vec<String>], query: &[String], top_n: usize, k: usize) -> Vec<usize> {
    let mut by_bm25: Vec<(usize, f64)> = (0..docs.len())
        .map(|d| (d, oracle_bm25(docs, query, d)))
        .collect();
    // Stable sorts keep earlier documents first on ties.
    by_bm25.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    by_bm25.truncate(top_n);
    let mut by_alpha: Vec<(usize, f64)> = by_bm25
        .into_iter()
        .map(|(d, _)| (d, oracle_alpha(query, &docs[d])))
        .collect();
    by_alpha.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    by_alpha.into_iter().take(k).map(|(d, _)| d).collect()
}
