//! Reciprocal rank, truncated rank-biased overlap and the set-dissimilarity
//! reward built on it.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::retrieval::Ranking;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("mean over an empty list is undefined")]
    Empty,
    #[error("need at least 2 rankings, got {0}")]
    TooFewRankings(usize),
    #[error("invalid RBO configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RboConfig {
    pub p: f64,
    pub eval_depth: usize,
}

impl Default for RboConfig {
    fn default() -> Self {
        Self { p: 0.9, eval_depth: 100 }
    }
}

impl RboConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(MetricError::Config(format!("p {} outside (0, 1)", self.p)));
        }
        if self.eval_depth == 0 {
            return Err(MetricError::Config("eval_depth must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn reciprocal_rank(rank: Option<usize>) -> f64 {
    rank.map_or(0.0, |r| 1.0 / r as f64)
}

/// Mean reciprocal rank; a missing rank contributes 0.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, MetricError> {
    if ranks.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(ranks.iter().map(|&r| reciprocal_rank(r)).sum::<f64>() / ranks.len() as f64)
}

/// `(1-p) * sum_{d=1}^{D} p^{d-1} |S_:d ∩ T_:d| / d` with
/// `D = min(|S|, |T|, eval_depth)`.
pub fn rbo_ids<S: AsRef<str>, T: AsRef<str>>(s: &[S], t: &[T], cfg: &RboConfig) -> f64 {
    let depth = s.len().min(t.len()).min(cfg.eval_depth);
    let mut seen_s: HashSet<&str> = HashSet::with_capacity(depth);
    let mut seen_t: HashSet<&str> = HashSet::with_capacity(depth);
    let mut overlap = 0usize;
    let mut weight = 1.0;
    let mut sum = 0.0;
    for d in 0..depth {
        let (a, b) = (s[d].as_ref(), t[d].as_ref());
        if a == b {
            overlap += 1;
        } else {
            overlap += usize::from(seen_t.contains(a)) + usize::from(seen_s.contains(b));
        }
        seen_s.insert(a);
        seen_t.insert(b);
        sum += weight * overlap as f64 / (d + 1) as f64;
        weight *= cfg.p;
    }
    (1.0 - cfg.p) * sum
}

pub fn rbo(s: &Ranking, t: &Ranking, cfg: &RboConfig) -> f64 {
    let a: Vec<&str> = s.ids().collect();
    let b: Vec<&str> = t.ids().collect();
    rbo_ids(&a, &b, cfg)
}

/// Mean RBO over unordered pairs.
pub fn mean_pairwise_rbo(rankings: &[Ranking], cfg: &RboConfig) -> Result<f64, MetricError> {
    let n = rankings.len();
    if n < 2 {
        return Err(MetricError::TooFewRankings(n));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += rbo(&rankings[i], &rankings[j], cfg);
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// `-sum_i sum_{j != i} rbo(R_i, R_j)`: every unordered pair counts twice.
pub fn dissimilarity_reward(rankings: &[Ranking], cfg: &RboConfig) -> f64 {
    dissimilarity_with(rankings, |a, b| rbo(a, b, cfg))
}

/// The same double sum under an arbitrary similarity.
pub fn dissimilarity_with<T>(items: &[T], sim: impl Fn(&T, &T) -> f64) -> f64 {
    let mut sum = 0.0;
    for (i, a) in items.iter().enumerate() {
        for (j, b) in items.iter().enumerate() {
            if i != j {
                sum += sim(a, b);
            }
        }
    }
    -sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub qid: String,
    pub reciprocal_rank: f64,
    pub pairwise_rbo: Option<f64>,
}

/// Aggregates plus the per-query rows they are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub mean_pairwise_rbo: Option<f64>,
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self, MetricError> {
        if rows.is_empty() {
            return Err(MetricError::Empty);
        }
        let mrr = rows.iter().map(|r| r.reciprocal_rank).sum::<f64>() / rows.len() as f64;
        let rbos: Vec<f64> = rows.iter().filter_map(|r| r.pairwise_rbo).collect();
        let mean_pairwise_rbo = (!rbos.is_empty()).then(|| rbos.iter().sum::<f64>() / rbos.len() as f64);
        Ok(Self { mrr, mean_pairwise_rbo, rows })
    }
}
