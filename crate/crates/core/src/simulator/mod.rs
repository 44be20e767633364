//! Multi-turn evaluation: an epsilon-greedy simulated user picks among the
//! suggestions a generator shows, the chosen query is retrieved and scored
//! against the hidden intent, and the loop repeats for a fixed budget.

mod experiment;
mod external;
mod generators;
mod live;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use experiment::{
    load_sessions_jsonl, mrr_by_turn, run_experiment, summarize, EvalQuery, ExperimentArtifacts, ExperimentConfig,
    ExperimentInputs, GeneratorKind, GeneratorSpec, HeatmapCell, RboRow, ResultRow,
};
pub use external::{load_fixtures, parse_response, ExternalClient, ExternalConfig, ExternalError, ENDPOINT_ENV};
pub use generators::{
    kmeans, pool_cluster_generate, BeamGenerator, ContextMode, ExternalGenerator, FixtureGenerator, Generation,
    Generator, ModelGenerator, PoolClusterGenerator, PoolConfig,
};
pub use live::{LiveError, LiveSession, LiveSnapshot, LiveStatus, LiveTurn, RankedSnippet, SessionStore};

use crate::metrics::reciprocal_rank;
use crate::policy::{PolicyError, SessionState};
use crate::retrieval::{rank_of_first_relevant, Retriever};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid user configuration: {0}")]
    User(String),
    #[error("generator {id}: {reason}")]
    Generator { id: String, reason: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    External(#[from] ExternalError),
    #[error("experiment configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: std::path::PathBuf, line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UserConfig {
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for UserConfig {
    fn default() -> Self {
        Self { epsilon: 0.0, seed: 0 }
    }
}

impl UserConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SimError::User(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

/// Rank of the first relevant document for each suggestion.
pub fn oracle_ranks(
    suggestions: &[String],
    intent: &BTreeSet<String>,
    index: &dyn Retriever,
    depth: usize,
) -> Vec<Option<usize>> {
    suggestions.iter().map(|s| rank_of_first_relevant(&index.search(s, depth), intent)).collect()
}

/// Index of the best-ranked suggestion; missing ranks count as last and ties
/// go to the lowest index.
pub fn best_by_rank(ranks: &[Option<usize>]) -> usize {
    let key = |r: &Option<usize>| r.unwrap_or(usize::MAX);
    ranks.iter().enumerate().min_by_key(|(i, r)| (key(r), *i)).map_or(0, |(i, _)| i)
}

/// Epsilon-greedy choice among `suggestions`: uniform with probability
/// epsilon, else the oracle pick. A draw is consumed on every call so the
/// stream stays aligned across epsilon values.
pub fn user_choose(
    suggestions: &[String],
    intent: &BTreeSet<String>,
    index: &dyn Retriever,
    depth: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let explore = rng.random::<f64>() < epsilon;
    let uniform = rng.random_range(0..suggestions.len().max(1));
    if suggestions.len() <= 1 {
        return 0;
    }
    if explore {
        uniform
    } else {
        best_by_rank(&oracle_ranks(suggestions, intent, index, depth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRow {
    pub turn: usize,
    /// Suggestions shown this turn; empty at turn 0.
    pub shown: Vec<String>,
    pub chosen: Option<usize>,
    /// Query retrieved this turn: the raw query at turn 0.
    pub query: String,
    pub rank: Option<usize>,
    pub reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub qid: String,
    pub generator: String,
    pub k: usize,
    pub epsilon: f64,
    pub repeat: usize,
    pub turns: Vec<TurnRow>,
    /// Set when generation failed and the session stopped early.
    pub truncated_at: Option<usize>,
    pub flags: Vec<String>,
}

impl SessionRecord {
    pub fn reciprocal_ranks(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reciprocal_rank).collect()
    }
}

/// Independent stream per (experiment seed, query, generator, repeat).
pub fn session_rng(seed: u64, qid: &str, generator: &str, repeat: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [qid.as_bytes(), generator.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update((repeat as u64).to_le_bytes());
    let digest = h.finalize();
    let mut seed_bytes = [0u8; 32];
    seed_bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed_bytes)
}

/// Inputs shared by every session of an experiment cell.
pub struct SessionSpec<'a> {
    pub qid: &'a str,
    pub initial_query: &'a str,
    pub intent: &'a BTreeSet<String>,
    pub turns: usize,
    pub epsilon: f64,
    pub depth: usize,
    pub repeat: usize,
}

fn score(index: &dyn Retriever, query: &str, intent: &BTreeSet<String>, depth: usize) -> (Option<usize>, f64) {
    let rank = rank_of_first_relevant(&index.search(query, depth), intent);
    (rank, reciprocal_rank(rank))
}

pub fn run_session(
    generator: &dyn Generator,
    spec: &SessionSpec<'_>,
    index: &dyn Retriever,
    rng: &mut ChaCha8Rng,
) -> SessionRecord {
    let (rank, rr) = score(index, spec.initial_query, spec.intent, spec.depth);
    let mut rec = SessionRecord {
        qid: spec.qid.to_owned(),
        generator: generator.id().to_owned(),
        k: generator.k(),
        epsilon: spec.epsilon,
        repeat: spec.repeat,
        turns: vec![TurnRow {
            turn: 0,
            shown: Vec::new(),
            chosen: None,
            query: spec.initial_query.to_owned(),
            rank,
            reciprocal_rank: rr,
        }],
        truncated_at: None,
        flags: Vec::new(),
    };
    let mut state = SessionState::new(spec.initial_query);
    for turn in 1..=spec.turns {
        let context = match generator.context() {
            ContextMode::Accumulate => state.clone(),
            ContextMode::Replace => SessionState::new(state.current_query()),
        };
        let generated = match generator.generate(&context, rng) {
            Ok(g) if !g.set.is_empty() => g,
            Ok(_) => {
                rec.truncated_at = Some(turn);
                rec.flags.push(format!("turn {turn}: no suggestions"));
                break;
            }
            Err(e) => {
                rec.truncated_at = Some(turn);
                rec.flags.push(format!("turn {turn}: {e}"));
                break;
            }
        };
        if let Some(f) = generated.flag {
            rec.flags.push(format!("turn {turn}: {f}"));
        }
        let shown = generated.set.suggestions;
        let chosen = user_choose(&shown, spec.intent, index, spec.depth, spec.epsilon, rng);
        let query = shown[chosen].clone();
        let (rank, rr) = score(index, &query, spec.intent, spec.depth);
        state.select(query.clone());
        rec.turns.push(TurnRow { turn, shown, chosen: Some(chosen), query, rank, reciprocal_rank: rr });
    }
    rec
}

/// Re-scores a logged session from its recorded choices.
pub fn replay(record: &SessionRecord, intent: &BTreeSet<String>, index: &dyn Retriever, depth: usize) -> Vec<f64> {
    record
        .turns
        .iter()
        .map(|t| {
            let q = match t.chosen {
                Some(c) => t.shown.get(c).map_or(t.query.as_str(), String::as_str),
                None => t.query.as_str(),
            };
            score(index, q, intent, depth).1
        })
        .collect()
}
