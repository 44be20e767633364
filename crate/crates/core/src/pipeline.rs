//! Stage wiring shared by the CLI, the service and the test suites: corpus
//! loading, model training per stage, and generator construction.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::config::{ConfigError, CorpusKind, RunConfig};
use crate::corpus::{
    build_sft_sequences, generate_toy_corpus, load_collection, load_qrels, load_queries, load_sft_jsonl,
    one_to_one_records, save_sft_jsonl, CorpusError, DocumentStore, QuerySet, SftRecord, ToyCorpus,
};
use crate::metrics::RboConfig;
use crate::ppo::{train_ppo, CheckpointSink, PpoConfig, PpoError, PpoOutcome};
use crate::retrieval::{Bm25Index, Bm25Params, EmbeddingIndex, RetrievalError};
use crate::seqmodel::checkpoint::{self, CheckpointError, Stage};
use crate::seqmodel::{
    train_supervised, DecodeConfig, ModelConfig, ModelError, PolicyModel, SftConfig, SftReport, TrainError, Vocabulary,
};
use crate::simulator::{
    load_fixtures, BeamGenerator, ContextMode, EvalQuery, ExternalClient, ExternalGenerator, FixtureGenerator,
    Generator, GeneratorKind, GeneratorSpec, ModelGenerator, PoolClusterGenerator, SimError,
};

/// Decode budget for a K-suggestion set.
pub const MAX_NEW_TOKENS: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Run(#[from] crate::run::RunError),
}

/// Everything the pipeline needs from a corpus, whatever its source.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub store: DocumentStore,
    pub queries: QuerySet,
    /// Session id (same as the query id) to the ambiguous starting query.
    pub sessions: BTreeMap<String, String>,
    pub sft: Vec<SftRecord>,
    /// Starting queries excluded from training and from the dev set.
    pub held_out: BTreeSet<String>,
}

impl From<ToyCorpus> for CorpusBundle {
    fn from(c: ToyCorpus) -> Self {
        let held_out = c.held_out_topic_words().into_iter().collect();
        Self { store: c.store, queries: c.queries, sessions: c.sessions, sft: c.sft, held_out }
    }
}

pub const CORPUS_FILES: [&str; 6] = ["collection.tsv", "queries.tsv", "qrels.txt", "sft.jsonl", "sessions.tsv", "heldout.txt"];

impl CorpusBundle {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, PipelineError> {
        match cfg.corpus.kind {
            CorpusKind::Toy => Ok(generate_toy_corpus(&cfg.corpus.toy)?.into()),
            CorpusKind::Files => Self::load_dir(&cfg.paths.data_dir),
        }
    }

    /// Reads the corpus files; `sessions.tsv` defaults to each query's own
    /// text and `heldout.txt` to empty.
    pub fn load_dir(dir: &Path) -> Result<Self, PipelineError> {
        let f = |n: &str| dir.join(n);
        for n in &CORPUS_FILES[..4] {
            if !f(n).exists() {
                return Err(ConfigError::Missing { what: "corpus file", path: f(n) }.into());
            }
        }
        let store = load_collection(&f("collection.tsv"))?;
        let queries = QuerySet::new(load_queries(&f("queries.tsv"))?, load_qrels(&f("qrels.txt"))?);
        queries.validate(&store)?;
        let sft = load_sft_jsonl(&f("sft.jsonl"))?;
        let sessions = if f("sessions.tsv").exists() { load_queries(&f("sessions.tsv"))? } else { queries.queries.clone() };
        let held_out = if f("heldout.txt").exists() {
            std::fs::read_to_string(f("heldout.txt"))
                .map_err(|source| CorpusError::Io { path: f("heldout.txt"), source })?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect()
        } else {
            BTreeSet::new()
        };
        Ok(Self { store, queries, sessions, sft, held_out })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_owned(), source })?;
        let files = CORPUS_FILES.map(|n| dir.join(n));
        self.store.save_tsv(&files[0])?;
        self.queries.save_queries_tsv(&files[1])?;
        self.queries.save_qrels(&files[2])?;
        save_sft_jsonl(&self.sft, &files[3])?;
        let lines = |it: Vec<String>| it.join("\n") + if it.is_empty() { "" } else { "\n" };
        let io = |p: &Path| {
            let p = p.to_owned();
            move |source| CorpusError::Io { path: p, source }
        };
        std::fs::write(&files[4], lines(self.sessions.iter().map(|(q, t)| format!("{q}\t{t}")).collect()))
            .map_err(io(&files[4]))?;
        std::fs::write(&files[5], lines(self.held_out.iter().cloned().collect())).map_err(io(&files[5]))?;
        Ok(files.to_vec())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut texts: Vec<&str> = self.store.iter().map(|(_, t)| t).collect();
        texts.extend(self.queries.queries.values().map(String::as_str));
        texts.extend(self.sessions.values().map(String::as_str));
        for r in &self.sft {
            texts.push(&r.query);
            texts.extend(r.suggestions.iter().map(String::as_str));
        }
        Vocabulary::from_texts(texts)
    }

    /// Sessions whose starting query is not held out, by query id.
    pub fn dev_queries(&self) -> Vec<EvalQuery> {
        self.sessions
            .iter()
            .filter(|(_, q)| !self.held_out.contains(*q))
            .filter_map(|(qid, q)| {
                self.queries.relevant(qid).map(|rel| EvalQuery { qid: qid.clone(), initial_query: q.clone(), intent: rel.clone() })
            })
            .collect()
    }

    /// Distinct starting queries of the supervised records.
    pub fn train_prompts(&self) -> Vec<String> {
        self.sft.iter().map(|r| r.query.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn held_out_prompts(&self) -> Vec<String> {
        self.held_out.iter().cloned().collect()
    }
}

pub fn build_index(bundle: &CorpusBundle, params: Bm25Params) -> Result<Bm25Index, PipelineError> {
    Ok(Bm25Index::build(&bundle.store, params)?)
}

/// The saved index when present, otherwise one built from the corpus.
pub fn load_or_build_index(cfg: &RunConfig, bundle: &CorpusBundle) -> Result<Bm25Index, PipelineError> {
    if cfg.paths.index.exists() {
        let idx = Bm25Index::load(&cfg.paths.index)?;
        if idx.doc_count() == bundle.store.len() && idx.params() == cfg.bm25 {
            return Ok(idx);
        }
        tracing::warn!(path = %cfg.paths.index.display(), "saved index does not match corpus or params; rebuilding");
    }
    build_index(bundle, cfg.bm25)
}

pub fn train_sft_model(
    records: &[SftRecord],
    vocab: &Vocabulary,
    model: ModelConfig,
    sft: &SftConfig,
    seed: u64,
) -> Result<(PolicyModel, SftReport), PipelineError> {
    let seqs = build_sft_sequences(records, vocab)?;
    let mut m = PolicyModel::new(model, vocab.len(), seed)?;
    let report = train_supervised(&mut m, &seqs, sft)?;
    Ok((m, report))
}

/// Model behind the beam and pool baselines: one suggestion per sequence.
pub fn train_one_to_one_model(
    bundle: &CorpusBundle,
    vocab: &Vocabulary,
    model: ModelConfig,
    sft: &SftConfig,
    seed: u64,
) -> Result<(PolicyModel, SftReport), PipelineError> {
    train_sft_model(&one_to_one_records(&bundle.sft), vocab, model, sft, seed)
}

pub fn train_ppo_model(
    sft_model: &PolicyModel,
    vocab: &Vocabulary,
    bundle: &CorpusBundle,
    index: &Bm25Index,
    ppo: &PpoConfig,
    rbo: &RboConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<PpoOutcome, PipelineError> {
    let sink = checkpoint_dir.map(|dir| CheckpointSink { dir, vocab });
    Ok(train_ppo(sft_model, vocab, &bundle.train_prompts(), index, ppo, rbo, sink)?)
}

/// Loads a checkpoint, turning a missing file into a configuration error.
pub fn load_checkpoint(path: &Path, what: &'static str, vocab: Option<&Vocabulary>) -> Result<checkpoint::Checkpoint, PipelineError> {
    if !path.exists() {
        return Err(ConfigError::Missing { what, path: path.to_owned() }.into());
    }
    Ok(checkpoint::load(path, vocab)?)
}

/// Models available to generators, keyed by the stage they come from.
pub struct GeneratorFactory {
    pub vocab: Arc<Vocabulary>,
    pub store: Arc<DocumentStore>,
    pub circle: Option<Arc<PolicyModel>>,
    pub supervised: Option<Arc<PolicyModel>>,
    pub one_to_one: Option<Arc<PolicyModel>>,
}

fn checkpoint_for(kind: GeneratorKind, cfg: &RunConfig) -> Option<(&'static str, PathBuf)> {
    let p = &cfg.paths;
    match kind {
        GeneratorKind::Circle => Some(("PPO checkpoint", p.ppo_checkpoint.clone())),
        GeneratorKind::Supervised => Some(("SFT checkpoint", p.sft_checkpoint.clone())),
        GeneratorKind::Beam | GeneratorKind::PoolCluster => Some(("one-to-one checkpoint", p.one_to_one_checkpoint.clone())),
        GeneratorKind::ExternalApi | GeneratorKind::Fixture => None,
    }
}

/// Fails on the first missing input a generator needs, before any work.
pub fn check_generator_inputs(specs: &[GeneratorSpec], cfg: &RunConfig) -> Result<(), ConfigError> {
    for s in specs {
        if let Some((what, default)) = checkpoint_for(s.kind, cfg) {
            let path = s.checkpoint.clone().unwrap_or(default);
            if !path.exists() {
                return Err(ConfigError::Missing { what, path });
            }
        }
        match s.kind {
            GeneratorKind::Fixture => match &s.fixtures {
                Some(p) if p.exists() => {}
                Some(p) => return Err(ConfigError::Missing { what: "fixture file", path: p.clone() }),
                None => return Err(ConfigError::Invalid(format!("generator {} needs `fixtures`", s.id()))),
            },
            GeneratorKind::ExternalApi => {
                if let Some(p) = s.external.fixtures.as_ref().filter(|p| !p.exists()) {
                    return Err(ConfigError::Missing { what: "fixture file", path: p.clone() });
                }
            }
            _ => {}
        }
    }
    Ok(())
}

impl GeneratorFactory {
    /// Loads the checkpoints `specs` refer to.
    pub fn from_checkpoints(
        specs: &[GeneratorSpec],
        cfg: &RunConfig,
        vocab: Arc<Vocabulary>,
        store: Arc<DocumentStore>,
    ) -> Result<Self, PipelineError> {
        check_generator_inputs(specs, cfg)?;
        let mut f = Self { vocab, store, circle: None, supervised: None, one_to_one: None };
        for s in specs {
            let Some((what, default)) = checkpoint_for(s.kind, cfg) else { continue };
            let path = s.checkpoint.clone().unwrap_or(default);
            let model = Arc::new(load_checkpoint(&path, what, Some(&f.vocab))?.model);
            let slot = match s.kind {
                GeneratorKind::Circle => &mut f.circle,
                GeneratorKind::Supervised => &mut f.supervised,
                _ => &mut f.one_to_one,
            };
            *slot = Some(model);
        }
        Ok(f)
    }

    fn model(&self, slot: &Option<Arc<PolicyModel>>, spec: &GeneratorSpec) -> Result<Arc<PolicyModel>, PipelineError> {
        slot.clone().ok_or_else(|| {
            ConfigError::Invalid(format!("no model loaded for generator {} ({})", spec.id(), spec.kind.name())).into()
        })
    }

    pub fn build(&self, spec: &GeneratorSpec) -> Result<Box<dyn Generator>, PipelineError> {
        let id = spec.id();
        let decode = spec.decode.clone().unwrap_or_else(|| DecodeConfig::greedy(MAX_NEW_TOKENS));
        Ok(match spec.kind {
            GeneratorKind::Circle | GeneratorKind::Supervised => {
                let slot = if spec.kind == GeneratorKind::Circle { &self.circle } else { &self.supervised };
                Box::new(ModelGenerator {
                    id,
                    model: self.model(slot, spec)?,
                    vocab: Arc::clone(&self.vocab),
                    k: spec.k,
                    decode,
                    context: ContextMode::Accumulate,
                })
            }
            GeneratorKind::Beam => Box::new(BeamGenerator {
                id,
                model: self.model(&self.one_to_one, spec)?,
                vocab: Arc::clone(&self.vocab),
                k: spec.k,
                max_new_tokens: decode.max_new_tokens,
            }),
            GeneratorKind::PoolCluster => {
                let model = self.model(&self.one_to_one, spec)?;
                let embedder = Arc::new(EmbeddingIndex::build(&self.store, &model, &self.vocab)?);
                Box::new(PoolClusterGenerator {
                    id,
                    model,
                    vocab: Arc::clone(&self.vocab),
                    embedder,
                    k: spec.k,
                    cfg: spec.pool.clone(),
                })
            }
            GeneratorKind::ExternalApi => {
                let client = ExternalClient::new(spec.external.clone()).map_err(SimError::from)?;
                Box::new(ExternalGenerator { id, k: spec.k, client: Arc::new(client) })
            }
            GeneratorKind::Fixture => {
                let path = spec
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid(format!("generator {id} needs `fixtures`")))?;
                let map = load_fixtures(path).map_err(SimError::from)?;
                Box::new(FixtureGenerator { id, k: spec.k, map })
            }
        })
    }

    pub fn build_all(&self, specs: &[GeneratorSpec]) -> Result<Vec<Box<dyn Generator>>, PipelineError> {
        specs.iter().map(|s| self.build(s)).collect()
    }
}

/// Every stage trained in memory from one config: the path the test suites
/// take to avoid touching checkpoints on disk.
pub struct TrainedPipeline {
    pub bundle: CorpusBundle,
    pub vocab: Arc<Vocabulary>,
    pub index: Arc<Bm25Index>,
    pub sft: Arc<PolicyModel>,
    pub sft_report: SftReport,
    pub one_to_one: Option<Arc<PolicyModel>>,
    pub ppo: Option<PpoOutcome>,
}

impl TrainedPipeline {
    /// Trains SFT always, PPO when `with_ppo`, and the one-to-one model when
    /// `with_one_to_one`.
    pub fn train(cfg: &RunConfig, with_ppo: bool, with_one_to_one: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let bundle = CorpusBundle::from_config(cfg)?;
        let vocab = Arc::new(bundle.vocabulary());
        let index = Arc::new(build_index(&bundle, cfg.bm25)?);
        let (sft, sft_report) = train_sft_model(&bundle.sft, &vocab, cfg.model, &cfg.sft, cfg.seed)?;
        let one_to_one = if with_one_to_one {
            Some(Arc::new(train_one_to_one_model(&bundle, &vocab, cfg.model, &cfg.one_to_one, cfg.seed)?.0))
        } else {
            None
        };
        let ppo = if with_ppo {
            Some(train_ppo_model(&sft, &vocab, &bundle, &index, &cfg.ppo, &cfg.rbo, None)?)
        } else {
            None
        };
        Ok(Self { bundle, vocab, index, sft: Arc::new(sft), sft_report, one_to_one, ppo })
    }

    pub fn factory(&self) -> GeneratorFactory {
        GeneratorFactory {
            vocab: Arc::clone(&self.vocab),
            store: Arc::new(self.bundle.store.clone()),
            circle: self.ppo.as_ref().map(|o| Arc::new(o.model.clone())),
            supervised: Some(Arc::clone(&self.sft)),
            one_to_one: self.one_to_one.clone(),
        }
    }

    /// Saves the trained models under `cfg.paths`.
    pub fn save_checkpoints(&self, cfg: &RunConfig) -> Result<Vec<PathBuf>, PipelineError> {
        let mut out = Vec::new();
        let meta = serde_json::json!({ "seed": cfg.seed });
        checkpoint::save(&cfg.paths.sft_checkpoint, &self.sft, &self.vocab, Stage::Sft, meta.clone())?;
        out.push(cfg.paths.sft_checkpoint.clone());
        if let Some(m) = &self.one_to_one {
            checkpoint::save(&cfg.paths.one_to_one_checkpoint, m, &self.vocab, Stage::Sft, meta.clone())?;
            out.push(cfg.paths.one_to_one_checkpoint.clone());
        }
        if let Some(o) = &self.ppo {
            checkpoint::save(&cfg.paths.ppo_checkpoint, &o.model, &self.vocab, Stage::Ppo, meta)?;
            out.push(cfg.paths.ppo_checkpoint.clone());
        }
        Ok(out)
    }
}
