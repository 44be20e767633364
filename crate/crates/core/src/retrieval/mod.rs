//! Deterministic document retrieval: BM25 over an inverted index and a
//! dense scorer over the sequence model's token embeddings.

mod bm25;
mod embed;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, Bm25Params};
pub use embed::EmbeddingIndex;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot build an index from an empty store")]
    EmptyStore,
    #[error("document {0:?} has no indexable terms")]
    EmptyDocument(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("index file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Documents in non-increasing score order, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub query: String,
    pub entries: Vec<RankedDoc>,
    pub depth: usize,
}

impl Ranking {
    pub fn empty(query: impl Into<String>, depth: usize) -> Self {
        Self { query: query.into(), entries: Vec::new(), depth }
    }

    /// Sorts scored documents into a ranking truncated at `depth`.
    pub fn from_scores(query: impl Into<String>, mut scored: Vec<(String, f64)>, depth: usize) -> Self {
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        scored.dedup_by(|a, b| a.0 == b.0);
        scored.truncate(depth);
        Self {
            query: query.into(),
            entries: scored.into_iter().map(|(doc_id, score)| RankedDoc { doc_id, score }).collect(),
            depth,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn truncated(&self, depth: usize) -> Self {
        Self { query: self.query.clone(), entries: self.entries.iter().take(depth).cloned().collect(), depth }
    }
}

/// Anything that maps a query to a ranking. Implementations are pure.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, depth: usize) -> Ranking;
}

/// Lower-cased alphanumeric terms; used for documents and queries alike.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 1-based position of the first relevant document, if any.
pub fn rank_of_first_relevant(r: &Ranking, relevant: &BTreeSet<String>) -> Option<usize> {
    r.entries.iter().position(|e| relevant.contains(&e.doc_id)).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranking(ids: &[&str]) -> Ranking {
        let n = ids.len();
        Ranking::from_scores("q", ids.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)).collect(), 10)
    }

    #[test]
    fn first_relevant() {
        let r = ranking(&["d9", "d3", "d1"]);
        let rel = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(rank_of_first_relevant(&r, &rel(&["d3"])), Some(2));
        assert_eq!(rank_of_first_relevant(&r, &rel(&["d7"])), None);
        assert_eq!(rank_of_first_relevant(&r, &rel(&["d9", "d1"])), Some(1));
    }

    #[test]
    fn ties_by_ascending_id() {
        let r = Ranking::from_scores("q", vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0)], 10);
        assert_eq!(r.ids().collect::<Vec<_>>(), ["c", "a", "b"]);
        assert_eq!(r.truncated(2).ids().collect::<Vec<_>>(), ["c", "a"]);
    }

    #[test]
    fn analyzer() {
        assert_eq!(analyze("Jaguar, car-parts  X1"), ["jaguar", "car", "parts", "x1"]);
    }
}
