//! Synthetic corpus of ambiguous topic words with disjoint facets.
//!
//! Each topic has a short ambiguous query (its topic word). Each facet adds a
//! facet word and a handful of content words; facet documents mix these with
//! shared background words. The user intent behind a session is a facet
//! query `topic facet`, and the qrels map it to that facet's documents.
//! Gold suggestion lists name the facets, optionally followed by refinements
//! `topic facet content`, in either grouped or round-robin order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_sft_jsonl, CorpusError, DocumentStore, QuerySet, SftRecord};
use crate::seqmodel::Vocabulary;

const MIN_CONTENT_WORDS: usize = 4;
const MIN_BACKGROUND_WORDS: usize = 8;
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub n_topics: usize,
    pub facets_per_topic: usize,
    pub docs_per_facet: usize,
    /// Number of distinct words the corpus draws from.
    pub vocab_size: usize,
    pub seed: u64,
    /// Extra `topic facet content` suggestions per facet in gold lists.
    #[serde(default)]
    pub refinements_per_facet: usize,
    #[serde(default = "one")]
    pub records_per_topic: usize,
    /// Documents mentioning the topic word but no facet.
    #[serde(default)]
    pub generic_docs_per_topic: usize,
    /// Topics (counted in `n_topics`) that get no supervised records.
    #[serde(default)]
    pub held_out_topics: usize,
    /// Probability a gold list keeps each facet's refinements together.
    #[serde(default = "half")]
    pub grouped_prob: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            n_topics: 28,
            facets_per_topic: 2,
            docs_per_facet: 4,
            vocab_size: 400,
            seed: 7,
            refinements_per_facet: 4,
            records_per_topic: 6,
            generic_docs_per_topic: 4,
            held_out_topics: 4,
            grouped_prob: 0.65,
        }
    }
}

impl ToyCorpusSpec {
    /// Minimal spec with only the core counts set.
    pub fn new(n_topics: usize, facets_per_topic: usize, docs_per_facet: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            n_topics,
            facets_per_topic,
            docs_per_facet,
            vocab_size,
            seed,
            refinements_per_facet: 0,
            records_per_topic: 1,
            generic_docs_per_topic: 0,
            held_out_topics: 0,
            grouped_prob: 0.5,
        }
    }

    pub fn content_words_per_facet(&self) -> usize {
        self.refinements_per_facet.max(MIN_CONTENT_WORDS)
    }

    /// Smallest `vocab_size` that keeps every facet's words disjoint.
    pub fn required_vocab(&self) -> usize {
        self.n_topics * (1 + self.facets_per_topic * (1 + self.content_words_per_facet())) + MIN_BACKGROUND_WORDS
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: String| Err(CorpusError::Spec(m));
        if self.n_topics == 0 || self.facets_per_topic == 0 || self.docs_per_facet == 0 || self.records_per_topic == 0 {
            return err("n_topics, facets_per_topic, docs_per_facet and records_per_topic must be >= 1".into());
        }
        if self.held_out_topics >= self.n_topics {
            return err(format!("held_out_topics {} must be < n_topics {}", self.held_out_topics, self.n_topics));
        }
        if !(0.0..=1.0).contains(&self.grouped_prob) {
            return err(format!("grouped_prob {} outside [0, 1]", self.grouped_prob));
        }
        if self.vocab_size < self.required_vocab() {
            return err(format!(
                "vocab_size {} too small for disjoint facet vocabularies (need >= {})",
                self.vocab_size,
                self.required_vocab()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyFacet {
    pub qid: String,
    pub name: String,
    /// `topic facet`: the hidden user intent.
    pub query: String,
    /// `topic facet content` in fixed order.
    pub refinements: Vec<String>,
    pub docs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTopic {
    pub id: String,
    pub word: String,
    pub held_out: bool,
    pub facets: Vec<ToyFacet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub spec: ToyCorpusSpec,
    pub store: DocumentStore,
    /// Facet queries and their qrels.
    pub queries: QuerySet,
    /// Session start text per facet qid (the ambiguous topic word).
    pub sessions: BTreeMap<String, String>,
    pub sft: Vec<SftRecord>,
    pub topics: Vec<ToyTopic>,
}

impl ToyCorpus {
    pub fn vocabulary(&self) -> Vocabulary {
        let mut texts: Vec<&str> = self.store.iter().map(|(_, t)| t).collect();
        texts.extend(self.queries.queries.values().map(String::as_str));
        texts.extend(self.topics.iter().flat_map(|t| t.facets.iter().flat_map(|f| f.refinements.iter().map(String::as_str))));
        Vocabulary::from_texts(texts)
    }

    /// Facet qids of topics that have supervised records.
    pub fn dev_qids(&self) -> Vec<String> {
        self.topics
            .iter()
            .filter(|t| !t.held_out)
            .flat_map(|t| t.facets.iter().map(|f| f.qid.clone()))
            .collect()
    }

    pub fn held_out_topic_words(&self) -> Vec<String> {
        self.topics.iter().filter(|t| t.held_out).map(|t| t.word.clone()).collect()
    }

    pub fn trained_topic_words(&self) -> Vec<String> {
        self.topics.iter().filter(|t| !t.held_out).map(|t| t.word.clone()).collect()
    }

    /// Writes `collection.tsv`, `queries.tsv`, `qrels.txt`, `sft.jsonl`,
    /// `sessions.tsv` and `heldout.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>, CorpusError> {
        let files = ["collection.tsv", "queries.tsv", "qrels.txt", "sft.jsonl", "sessions.tsv", "heldout.txt"]
            .map(|f| dir.join(f));
        self.store.save_tsv(&files[0])?;
        self.queries.save_queries_tsv(&files[1])?;
        self.queries.save_qrels(&files[2])?;
        save_sft_jsonl(&self.sft, &files[3])?;
        super::write_lines(&files[4], self.sessions.iter().map(|(q, t)| format!("{q}\t{t}")))?;
        super::write_lines(&files[5], self.held_out_topic_words())?;
        Ok(files.to_vec())
    }
}

fn pseudo_words(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    *CONSONANTS.choose(rng).expect("non-empty") as char,
                    *VOWELS.choose(rng).expect("non-empty") as char,
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_content = spec.content_words_per_facet();
    let mut words = pseudo_words(spec.vocab_size, &mut rng).into_iter();
    let mut take = |n: usize| -> Vec<String> { words.by_ref().take(n).collect() };

    struct Draft {
        word: String,
        facets: Vec<(String, Vec<String>)>,
    }
    let drafts: Vec<Draft> = (0..spec.n_topics)
        .map(|_| Draft {
            word: take(1).remove(0),
            facets: (0..spec.facets_per_topic).map(|_| (take(1).remove(0), take(n_content))).collect(),
        })
        .collect();
    let background = take(usize::MAX);

    // held-out topics are the last ones
    let first_held_out = spec.n_topics - spec.held_out_topics;
    let mut store = DocumentStore::new();
    let mut queries = BTreeMap::new();
    let mut qrels = BTreeMap::new();
    let mut sessions = BTreeMap::new();
    let mut topics = Vec::with_capacity(spec.n_topics);

    let bg = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> Vec<String> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| background.choose(rng).expect("background words").clone()).collect()
    };

    for (ti, d) in drafts.iter().enumerate() {
        let tid = format!("t{ti:03}");
        let mut facets = Vec::with_capacity(d.facets.len());
        for (fi, (name, content)) in d.facets.iter().enumerate() {
            let qid = format!("{tid}f{fi}");
            let mut docs = Vec::with_capacity(spec.docs_per_facet);
            for di in 0..spec.docs_per_facet {
                let mut w = vec![d.word.clone(), name.clone()];
                w.push(content[di % n_content].clone());
                w.push(content[(di + 1) % n_content].clone());
                if rng.random_bool(0.5) {
                    w.push(content.choose(&mut rng).expect("content").clone());
                }
                w.extend(bg(&mut rng, 3, 6));
                w.shuffle(&mut rng);
                let id = format!("{qid}d{di:02}");
                store.insert(id.clone(), w.join(" "))?;
                docs.push(id);
            }
            let query = format!("{} {}", d.word, name);
            let refinements = content[..spec.refinements_per_facet]
                .iter()
                .map(|c| format!("{query} {c}"))
                .collect();
            queries.insert(qid.clone(), query.clone());
            qrels.insert(qid.clone(), docs.iter().cloned().collect::<BTreeSet<_>>());
            sessions.insert(qid.clone(), d.word.clone());
            facets.push(ToyFacet { qid, name: name.clone(), query, refinements, docs });
        }
        for gi in 0..spec.generic_docs_per_topic {
            let mut w = vec![d.word.clone(), d.word.clone()];
            w.extend(bg(&mut rng, 2, 4));
            w.shuffle(&mut rng);
            store.insert(format!("{tid}g{gi:02}"), w.join(" "))?;
        }
        topics.push(ToyTopic { id: tid, word: d.word.clone(), held_out: ti >= first_held_out, facets });
    }

    let mut sft = Vec::new();
    for t in topics.iter().filter(|t| !t.held_out) {
        for _ in 0..spec.records_per_topic {
            let mut order: Vec<&ToyFacet> = t.facets.iter().collect();
            order.shuffle(&mut rng);
            let grouped = rng.random_bool(spec.grouped_prob);
            let mut suggestions = Vec::new();
            if grouped {
                for f in &order {
                    suggestions.push(f.query.clone());
                    suggestions.extend(f.refinements.iter().cloned());
                }
            } else {
                suggestions.extend(order.iter().map(|f| f.query.clone()));
                for k in 0..spec.refinements_per_facet {
                    suggestions.extend(order.iter().map(|f| f.refinements[k].clone()));
                }
            }
            sft.push(SftRecord { query: t.word.clone(), suggestions });
        }
    }

    let queries = QuerySet::new(queries, qrels);
    queries.validate(&store)?;
    Ok(ToyCorpus { spec: spec.clone(), store, queries, sessions, sft, topics })
}

/// Splits suggestion lists into unique single-suggestion records, the
/// supervision of a one-to-one reformulation model.
pub fn one_to_one_records(records: &[SftRecord]) -> Vec<SftRecord> {
    let pairs: BTreeSet<(&str, &str)> = records
        .iter()
        .flat_map(|r| r.suggestions.iter().map(move |s| (r.query.as_str(), s.as_str())))
        .collect();
    pairs
        .into_iter()
        .map(|(q, s)| SftRecord { query: q.to_owned(), suggestions: vec![s.to_owned()] })
        .collect()
}
