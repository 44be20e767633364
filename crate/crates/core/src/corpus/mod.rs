//! Document collections, queries with relevance judgments, and supervised
//! suggestion records, plus a synthetic faceted corpus.

mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::seqmodel::{TokenSequence, VocabError, Vocabulary, BOS_ID, EOS_ID, SEP_ID};

pub use toy::{generate_toy_corpus, one_to_one_records, ToyCorpus, ToyCorpusSpec};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("duplicate id {id:?} (line {line})")]
    Duplicate { id: String, line: usize },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid toy corpus spec: {0}")]
    Spec(String),
    #[error("record {index}: {source}")]
    Tokenize { index: usize, source: VocabError },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_owned(), source }
}

/// Documents keyed by id; iteration is in ascending id order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentStore {
    docs: BTreeMap<String, String>,
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) -> Result<(), CorpusError> {
        let (id, text) = (id.into(), text.into());
        if id.is_empty() || text.trim().is_empty() {
            return Err(CorpusError::Invalid(format!("document {id:?} has an empty id or text")));
        }
        if self.docs.contains_key(&id) {
            return Err(CorpusError::Duplicate { id, line: self.docs.len() + 1 });
        }
        self.docs.insert(id, text);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.docs.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.docs.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.docs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn save_tsv(&self, path: &Path) -> Result<(), CorpusError> {
        write_lines(path, self.iter().map(|(id, text)| format!("{id}\t{text}")))
    }
}

/// Queries and the documents judged relevant to them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: BTreeMap<String, String>,
    pub qrels: BTreeMap<String, BTreeSet<String>>,
}

impl QuerySet {
    pub fn new(queries: BTreeMap<String, String>, qrels: BTreeMap<String, BTreeSet<String>>) -> Self {
        Self { queries, qrels }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn relevant(&self, qid: &str) -> Option<&BTreeSet<String>> {
        self.qrels.get(qid)
    }

    pub fn validate(&self, store: &DocumentStore) -> Result<(), CorpusError> {
        for (qid, docs) in &self.qrels {
            if let Some(d) = docs.iter().find(|d| !store.contains(d)) {
                return Err(CorpusError::Invalid(format!("qrels for {qid} reference unknown document {d}")));
            }
        }
        for qid in self.queries.keys() {
            if self.qrels.get(qid).is_none_or(BTreeSet::is_empty) {
                return Err(CorpusError::Invalid(format!("query {qid} has no relevant document")));
            }
        }
        Ok(())
    }

    pub fn save_queries_tsv(&self, path: &Path) -> Result<(), CorpusError> {
        write_lines(path, self.queries.iter().map(|(q, t)| format!("{q}\t{t}")))
    }

    pub fn save_qrels(&self, path: &Path) -> Result<(), CorpusError> {
        write_lines(
            path,
            self.qrels
                .iter()
                .flat_map(|(q, docs)| docs.iter().map(move |d| format!("{q} 0 {d} 1"))),
        )
    }
}

/// A query with its gold ordered suggestion list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub query: String,
    pub suggestions: Vec<String>,
}

impl SftRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.query.trim().is_empty() {
            return Err(CorpusError::Invalid("record with empty query".into()));
        }
        if self.suggestions.is_empty() {
            return Err(CorpusError::Invalid(format!("record {:?} has no suggestions", self.query)));
        }
        if self.suggestions.iter().any(|s| s.trim().is_empty()) {
            return Err(CorpusError::Invalid(format!("record {:?} has an empty suggestion", self.query)));
        }
        Ok(())
    }
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        w.write_all(l.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

fn parse_tsv_pairs(path: &Path) -> Result<Vec<(usize, String, String)>, CorpusError> {
    read_lines(path)?
        .into_iter()
        .map(|(line, l)| match l.split_once('\t') {
            Some((id, text)) if !id.is_empty() && !text.trim().is_empty() => {
                Ok((line, id.to_owned(), text.trim().to_owned()))
            }
            _ => Err(CorpusError::Parse { path: path.to_owned(), line, reason: "expected `id<TAB>text`".into() }),
        })
        .collect()
}

/// Reads `doc_id<TAB>text` lines.
pub fn load_collection(path: &Path) -> Result<DocumentStore, CorpusError> {
    let mut store = DocumentStore::new();
    for (line, id, text) in parse_tsv_pairs(path)? {
        if store.contains(&id) {
            return Err(CorpusError::Duplicate { id, line });
        }
        store.insert(id, text)?;
    }
    Ok(store)
}

/// Reads `qid<TAB>text` lines.
pub fn load_queries(path: &Path) -> Result<BTreeMap<String, String>, CorpusError> {
    let mut out = BTreeMap::new();
    for (line, id, text) in parse_tsv_pairs(path)? {
        if out.insert(id.clone(), text).is_some() {
            return Err(CorpusError::Duplicate { id, line });
        }
    }
    Ok(out)
}

/// Reads TREC `qid 0 doc_id rel` lines; only `rel >= 1` is kept.
pub fn load_qrels(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>, CorpusError> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (line, l) in read_lines(path)? {
        let parse = |reason: &str| CorpusError::Parse { path: path.to_owned(), line, reason: reason.into() };
        let cols: Vec<&str> = l.split_whitespace().collect();
        let [qid, _, doc, rel] = cols[..] else {
            return Err(parse("expected 4 columns `qid 0 doc_id rel`"));
        };
        let rel: i64 = rel.parse().map_err(|_| parse("relevance is not an integer"))?;
        if rel >= 1 {
            out.entry(qid.to_owned()).or_default().insert(doc.to_owned());
        }
    }
    Ok(out)
}

pub fn load_sft_jsonl(path: &Path) -> Result<Vec<SftRecord>, CorpusError> {
    read_lines(path)?
        .into_iter()
        .map(|(line, l)| {
            let rec: SftRecord = serde_json::from_str(&l)
                .map_err(|e| CorpusError::Parse { path: path.to_owned(), line, reason: e.to_string() })?;
            rec.validate()
                .map_err(|e| CorpusError::Parse { path: path.to_owned(), line, reason: e.to_string() })?;
            Ok(rec)
        })
        .collect()
}

pub fn save_sft_jsonl(records: &[SftRecord], path: &Path) -> Result<(), CorpusError> {
    write_lines(path, records.iter().map(|r| serde_json::to_string(r).expect("record serialises")))
}

/// `<bos> x <sep> y_1 <sep> ... <sep> y_K <eos>`.
pub fn record_to_sequence(record: &SftRecord, vocab: &Vocabulary) -> Result<TokenSequence, VocabError> {
    let mut seq = TokenSequence::new(vec![BOS_ID]);
    seq.extend_from_slice(&vocab.tokenize(&record.query)?);
    for s in &record.suggestions {
        seq.push(SEP_ID);
        seq.extend_from_slice(&vocab.tokenize(s)?);
    }
    seq.push(EOS_ID);
    Ok(seq)
}

pub fn build_sft_sequences(records: &[SftRecord], vocab: &Vocabulary) -> Result<Vec<TokenSequence>, CorpusError> {
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            r.validate()?;
            record_to_sequence(r, vocab).map_err(|source| CorpusError::Tokenize { index, source })
        })
        .collect()
}
