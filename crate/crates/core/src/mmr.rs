//! Greedy relevant-yet-diverse selection over generated candidates.
//!
//! Each step picks the remaining candidate maximizing
//!
//! ```text
//! alpha(q, x) - (lambda / |S|) * sum_{s in S} alpha(s, x)
//! ```
//!
//! where `S` holds the candidates already picked. With `S` empty the
//! redundancy term is zero, so the first pick is always the most relevant
//! candidate regardless of `lambda`. Ties go to the lowest candidate index.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{alpha, TokenSequence};

pub const DEFAULT_CANDIDATES: usize = 10;
pub const DEFAULT_KEEP: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("no candidates to filter")]
    NoCandidates,
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
}

/// Candidates requested (`m`), examples kept (`k`) and diversity weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    m: usize,
    k: usize,
    lambda: f64,
}

impl FilterConfig {
    pub fn new(m: usize, k: usize, lambda: f64) -> Result<Self, FilterError> {
        let config = FilterConfig { m, k, lambda };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.m == 0 || self.k == 0 {
            return Err(FilterError::InvalidConfig(format!(
                "m and k must be positive (m={}, k={})",
                self.m, self.k
            )));
        }
        if self.k > self.m {
            return Err(FilterError::InvalidConfig(format!(
                "k={} exceeds m={}",
                self.k, self.m
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(FilterError::InvalidConfig(format!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `m == k` turns filtering off: every generated candidate is kept.
    pub fn filtering_enabled(&self) -> bool {
        self.m != self.k
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            m: DEFAULT_CANDIDATES,
            k: DEFAULT_KEEP,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Score components of one greedy step, for the candidate that won it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScore {
    pub index: usize,
    pub relevance: f64,
    /// Negated mean similarity to already selected candidates; 0 on the first step.
    pub diversity: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub selected: Vec<usize>,
    pub steps: Vec<StepScore>,
    /// Fewer than `k` candidates were available.
    pub shortfall: bool,
}

pub fn mmr_select(
    query: &TokenSequence,
    candidates: &[TokenSequence],
    config: &FilterConfig,
) -> Result<SelectionTrace, FilterError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(FilterError::NoCandidates);
    }

    let relevance: Vec<f64> = candidates.iter().map(|c| alpha(query, c).get()).collect();
    let target = config.k.min(candidates.len());
    let mut redundancy = vec![0.0_f64; candidates.len()];
    let mut taken = vec![false; candidates.len()];
    let mut selected = Vec::with_capacity(target);
    let mut steps = Vec::with_capacity(target);

    while selected.len() < target {
        let mut best: Option<StepScore> = None;
        for (i, cand_rel) in relevance.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let diversity = if selected.is_empty() {
                0.0
            } else {
                -(redundancy[i] / selected.len() as f64)
            };
            let objective = cand_rel + config.lambda * diversity;
            if best.is_none_or(|b| objective > b.objective) {
                best = Some(StepScore {
                    index: i,
                    relevance: *cand_rel,
                    diversity,
                    objective,
                });
            }
        }
        let Some(step) = best else { break };
        taken[step.index] = true;
        selected.push(step.index);
        steps.push(step);
        let picked = &candidates[step.index];
        for (i, cand) in candidates.iter().enumerate() {
            if !taken[i] {
                redundancy[i] += alpha(picked, cand).get();
            }
        }
    }

    Ok(SelectionTrace {
        selected,
        steps,
        shortfall: candidates.len() < config.k,
    })
}

/// Index of the first MMR pick, which is the argmax of relevance for any `lambda`.
pub fn first_pick_is_max_relevance(
    query: &TokenSequence,
    candidates: &[TokenSequence],
) -> Result<usize, FilterError> {
    let config = FilterConfig::new(1, 1, DEFAULT_LAMBDA)?;
    let trace = mmr_select(query, candidates, &config)?;
    Ok(trace.selected[0])
}
