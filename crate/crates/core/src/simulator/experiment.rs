//! Grid runner: every (generator, epsilon) cell simulates sessions over the
//! dev queries and reports per-turn MRR, the mean pairwise RBO of turn-1
//! suggestion rankings, and an epsilon-by-turn MRR grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::external::ExternalConfig;
use super::generators::{Generator, PoolConfig};
use super::{run_session, session_rng, SessionRecord, SessionSpec, SimError};
use crate::metrics::{mean_pairwise_rbo, RboConfig};
use crate::retrieval::Retriever;
use crate::seqmodel::DecodeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Circle,
    Supervised,
    Beam,
    PoolCluster,
    ExternalApi,
    Fixture,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Supervised => "supervised",
            Self::Beam => "beam",
            Self::PoolCluster => "pool_cluster",
            Self::ExternalApi => "external_api",
            Self::Fixture => "fixture",
        }
    }
}

fn default_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    /// Defaults to the kind name.
    #[serde(default)]
    pub id: Option<String>,
    pub kind: GeneratorKind,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Overrides the run-level checkpoint for this kind.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
    #[serde(default)]
    pub external: ExternalConfig,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, k: usize) -> Self {
        Self {
            id: None,
            kind,
            k,
            checkpoint: None,
            decode: None,
            pool: PoolConfig::default(),
            fixtures: None,
            external: ExternalConfig::default(),
        }
    }

    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.name().to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub turns: usize,
    pub epsilons: Vec<f64>,
    pub sessions_per_query: usize,
    pub depth: usize,
    pub seed: u64,
    /// Generator whose sessions fill the epsilon-by-turn grid; defaults to
    /// the first one.
    pub heatmap_generator: Option<String>,
    /// Use only the first this many dev queries; 0 keeps all.
    pub max_queries: usize,
    pub rbo: RboConfig,
    pub generators: Vec<GeneratorSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            turns: 5,
            epsilons: vec![0.0, 0.25, 0.5],
            sessions_per_query: 1,
            depth: 100,
            seed: 0,
            heatmap_generator: None,
            max_queries: 0,
            rbo: RboConfig::default(),
            generators: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.epsilons.is_empty() {
            return bad("epsilons must not be empty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return bad(format!("epsilon {e} outside [0, 1]"));
        }
        if self.sessions_per_query == 0 || self.depth == 0 {
            return bad("sessions_per_query and depth must be >= 1".into());
        }
        self.rbo.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let mut ids = BTreeSet::new();
        for g in &self.generators {
            if g.k == 0 {
                return bad(format!("generator {}: K must be >= 1", g.id()));
            }
            if !ids.insert(g.id()) {
                return bad(format!("duplicate generator id {}", g.id()));
            }
        }
        if let Some(h) = &self.heatmap_generator {
            if !ids.contains(h) {
                return bad(format!("heatmap_generator {h} is not a configured generator"));
            }
        }
        Ok(())
    }
}

/// A dev query: the ambiguous text the session starts from and the hidden
/// intent it is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub qid: String,
    pub initial_query: String,
    pub intent: BTreeSet<String>,
}

pub struct ExperimentInputs<'a> {
    pub index: &'a dyn Retriever,
    pub queries: &'a [EvalQuery],
    pub generators: &'a [Box<dyn Generator>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub generator: String,
    pub k: usize,
    pub epsilon: f64,
    pub turn: usize,
    pub mrr: f64,
    /// Sessions that reached this turn.
    pub n_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RboRow {
    pub generator: String,
    pub k: usize,
    /// `None` when no session showed two or more suggestions at turn 1.
    pub mean_pairwise_rbo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub epsilon: f64,
    pub turn: usize,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentArtifacts {
    pub results: Vec<ResultRow>,
    pub rbo: Vec<RboRow>,
    pub heatmap: Vec<HeatmapCell>,
    pub sessions: Vec<SessionRecord>,
}

/// Per-turn mean reciprocal rank over the sessions that reached each turn.
pub fn mrr_by_turn(sessions: &[&SessionRecord], turns: usize) -> Vec<(f64, usize)> {
    (0..=turns)
        .map(|t| {
            let rrs: Vec<f64> = sessions.iter().filter_map(|s| s.turns.get(t)).map(|r| r.reciprocal_rank).collect();
            let n = rrs.len();
            (if n == 0 { 0.0 } else { rrs.iter().sum::<f64>() / n as f64 }, n)
        })
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig, inputs: &ExperimentInputs<'_>) -> Result<ExperimentArtifacts, SimError> {
    cfg.validate()?;
    if inputs.generators.is_empty() {
        return Err(SimError::Config("no generators".into()));
    }
    let queries = if cfg.max_queries == 0 { inputs.queries } else { &inputs.queries[..cfg.max_queries.min(inputs.queries.len())] };
    if queries.is_empty() {
        return Err(SimError::Config("no dev queries".into()));
    }
    let mut sessions = Vec::new();
    for g in inputs.generators {
        for &epsilon in &cfg.epsilons {
            for q in queries {
                for repeat in 0..cfg.sessions_per_query {
                    let mut rng = session_rng(cfg.seed, &q.qid, g.id(), repeat);
                    let spec = SessionSpec {
                        qid: &q.qid,
                        initial_query: &q.initial_query,
                        intent: &q.intent,
                        turns: cfg.turns,
                        epsilon,
                        depth: cfg.depth,
                        repeat,
                    };
                    sessions.push(run_session(g.as_ref(), &spec, inputs.index, &mut rng));
                }
            }
        }
    }

    Ok(summarize(sessions, cfg.turns, &cfg.rbo, cfg.heatmap_generator.as_deref(), inputs.index))
}

fn first_seen<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Builds the result tables from session records. Generators and epsilon
/// values keep the order they first appear in; the heatmap defaults to the
/// first generator.
pub fn summarize(
    sessions: Vec<SessionRecord>,
    turns: usize,
    rbo_cfg: &RboConfig,
    heatmap_generator: Option<&str>,
    index: &dyn Retriever,
) -> ExperimentArtifacts {
    let generators = first_seen(sessions.iter().map(|s| (s.generator.clone(), s.k)));
    let epsilons = first_seen(sessions.iter().map(|s| s.epsilon));
    let mut results = Vec::new();
    let mut rbo = Vec::new();
    for (g, k) in &generators {
        for &epsilon in &epsilons {
            let cell: Vec<&SessionRecord> =
                sessions.iter().filter(|s| s.generator == *g && s.epsilon == epsilon).collect();
            if cell.is_empty() {
                continue;
            }
            for (turn, (mrr, n_sessions)) in mrr_by_turn(&cell, turns).into_iter().enumerate() {
                results.push(ResultRow { generator: g.clone(), k: *k, epsilon, turn, mrr, n_sessions });
            }
        }
        // turn-1 sets are drawn before any user choice, so the first epsilon
        // is representative
        let first = sessions.iter().find(|s| s.generator == *g).map(|s| s.epsilon);
        let vals: Vec<f64> = sessions
            .iter()
            .filter(|s| s.generator == *g && Some(s.epsilon) == first)
            .filter_map(|s| s.turns.get(1))
            .filter(|t| t.shown.len() >= 2)
            .map(|t| {
                let r: Vec<_> = t.shown.iter().map(|q| index.search(q, rbo_cfg.eval_depth)).collect();
                mean_pairwise_rbo(&r, rbo_cfg).expect("two or more rankings")
            })
            .collect();
        let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        rbo.push(RboRow { generator: g.clone(), k: *k, mean_pairwise_rbo: mean });
    }

    let heat_id = heatmap_generator.map(str::to_owned).or_else(|| generators.first().map(|g| g.0.clone()));
    let heatmap = results
        .iter()
        .filter(|r| Some(&r.generator) == heat_id.as_ref())
        .map(|r| HeatmapCell { epsilon: r.epsilon, turn: r.turn, mrr: r.mrr })
        .collect();
    ExperimentArtifacts { results, rbo, heatmap, sessions }
}

impl ExperimentArtifacts {
    pub fn results_csv(&self) -> String {
        let mut s = String::from("generator,k,epsilon,turn,mrr,n_sessions\n");
        for r in &self.results {
            writeln!(s, "{},{},{},{},{:.6},{}", r.generator, r.k, r.epsilon, r.turn, r.mrr, r.n_sessions).unwrap();
        }
        s
    }

    pub fn rbo_csv(&self) -> String {
        let mut s = String::from("generator,k,mean_pairwise_rbo\n");
        for r in &self.rbo {
            let v = r.mean_pairwise_rbo.map_or_else(String::new, |v| format!("{v:.6}"));
            writeln!(s, "{},{},{v}", r.generator, r.k).unwrap();
        }
        s
    }

    pub fn heatmap_csv(&self) -> String {
        let mut s = String::from("epsilon,turn,mrr\n");
        for c in &self.heatmap {
            writeln!(s, "{},{},{:.6}", c.epsilon, c.turn, c.mrr).unwrap();
        }
        s
    }

    pub fn sessions_jsonl(&self) -> String {
        self.sessions.iter().map(|r| serde_json::to_string(r).expect("serialisable") + "\n").collect()
    }

    /// Writes the three CSVs and the session log into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
        let files = [
            ("results.csv", self.results_csv()),
            ("rbo_table.csv", self.rbo_csv()),
            ("heatmap.csv", self.heatmap_csv()),
            ("sessions.jsonl", self.sessions_jsonl()),
        ];
        fs::create_dir_all(dir).map_err(|source| SimError::Io { path: dir.to_owned(), source })?;
        let mut out = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|source| SimError::Io { path: path.clone(), source })?;
            out.push(path);
        }
        Ok(out)
    }
}

pub fn load_sessions_jsonl(path: &Path) -> Result<Vec<SessionRecord>, SimError> {
    let text = fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_owned(), source })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| SimError::Parse { path: path.to_owned(), line: i + 1, reason: e.to_string() })
        })
        .collect()
}
