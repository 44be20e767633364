use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{analyze, Ranking, RetrievalError, Retriever};
use crate::corpus::DocumentStore;

const FORMAT: &str = "circle-bm25";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    params: Bm25Params,
    doc_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Payload {
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    /// term -> (doc index, term frequency), doc index ascending
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    manifest: Manifest,
    payload: Payload,
}

/// Inverted index scored with Okapi BM25 (non-negative idf variant).
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    payload: Payload,
    avgdl: f64,
    lookup: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(store: &DocumentStore, params: Bm25Params) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyStore);
        }
        let mut doc_ids = Vec::with_capacity(store.len());
        let mut doc_len = Vec::with_capacity(store.len());
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (i, (id, text)) in store.iter().enumerate() {
            let terms = analyze(text);
            if terms.is_empty() {
                return Err(RetrievalError::EmptyDocument(id.to_owned()));
            }
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i as u32, f));
            }
            doc_ids.push(id.to_owned());
            doc_len.push(terms.len() as u32);
        }
        Ok(Self::from_parts(params, Payload { doc_ids, doc_len, postings }))
    }

    fn from_parts(params: Bm25Params, payload: Payload) -> Self {
        let avgdl = payload.doc_len.iter().map(|&l| l as f64).sum::<f64>() / payload.doc_len.len().max(1) as f64;
        let lookup = payload.doc_ids.iter().enumerate().map(|(i, d)| (d.clone(), i)).collect();
        Self { params, payload, avgdl, lookup }
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.payload.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.payload.doc_ids
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.lookup.contains_key(doc_id)
    }

    /// Number of distinct indexed documents; each appears in postings.
    pub fn covered_docs(&self) -> usize {
        let mut seen = vec![false; self.doc_count()];
        for list in self.payload.postings.values() {
            for &(d, _) in list {
                seen[d as usize] = true;
            }
        }
        seen.into_iter().filter(|&s| s).count()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count() as f64;
        (1.0 + (n - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
    }

    /// Score of every document that matches at least one query term.
    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        let Bm25Params { k1, b } = self.params;
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        for term in analyze(query) {
            let Some(list) = self.payload.postings.get(&term) else { continue };
            let idf = self.idf(list.len());
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = k1 * (1.0 - b + b * self.payload.doc_len[d as usize] as f64 / self.avgdl);
                *scores.entry(d as usize).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        scores.into_iter().collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        let file = IndexFile {
            manifest: Manifest {
                format: FORMAT.into(),
                version: VERSION,
                params: self.params,
                doc_count: self.doc_count(),
            },
            payload: self.payload.clone(),
        };
        let json = serde_json::to_vec(&file).map_err(|e| RetrievalError::Format(e.to_string()))?;
        fs::write(path, json).map_err(|source| RetrievalError::Io { path: path.to_owned(), source })
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let bytes = fs::read(path).map_err(|source| RetrievalError::Io { path: path.to_owned(), source })?;
        let file: IndexFile = serde_json::from_slice(&bytes).map_err(|e| RetrievalError::Format(e.to_string()))?;
        let m = &file.manifest;
        if m.format != FORMAT {
            return Err(RetrievalError::Format(format!("unknown format {:?}", m.format)));
        }
        if m.version != VERSION {
            return Err(RetrievalError::Format(format!("unsupported version {}", m.version)));
        }
        let p = &file.payload;
        if m.doc_count != p.doc_ids.len() || p.doc_len.len() != p.doc_ids.len() {
            return Err(RetrievalError::Format("document count does not match payload".into()));
        }
        if p.postings.values().flatten().any(|&(d, _)| d as usize >= p.doc_ids.len()) {
            return Err(RetrievalError::Format("posting references an unknown document".into()));
        }
        Ok(Self::from_parts(m.params, file.payload))
    }
}

impl Retriever for Bm25Index {
    fn search(&self, query: &str, depth: usize) -> Ranking {
        let scored = self
            .score_all(query)
            .into_iter()
            .map(|(d, s)| (self.payload.doc_ids[d].clone(), s))
            .collect();
        Ranking::from_scores(query, scored, depth)
    }
}
