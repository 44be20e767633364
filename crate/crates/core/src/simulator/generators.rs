use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array1;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::external::ExternalClient;
use super::SimError;
use crate::policy::{boundary_stop, build_prompt, generate_suggestion_set, split_generated, SessionState, SuggestionSet};
use crate::retrieval::EmbeddingIndex;
use crate::seqmodel::{decode, sample_with, DecodeConfig, DecodeMode, PolicyModel, Vocabulary};

/// How a generator is conditioned on earlier turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Prompt carries the initial query and every selection so far.
    Accumulate,
    /// The last selection replaces the query.
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub set: SuggestionSet,
    pub flag: Option<String>,
}

impl Generation {
    fn plain(set: SuggestionSet) -> Self {
        Self { set, flag: None }
    }
}

pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn k(&self) -> usize;
    fn context(&self) -> ContextMode;
    fn generate(&self, state: &SessionState, rng: &mut ChaCha8Rng) -> Result<Generation, SimError>;
}

fn gen_err(id: &str, e: impl std::fmt::Display) -> SimError {
    SimError::Generator { id: id.to_owned(), reason: e.to_string() }
}

/// A set-generating sequence model: CIRCLE after PPO, or its supervised
/// starting point.
pub struct ModelGenerator {
    pub id: String,
    pub model: Arc<PolicyModel>,
    pub vocab: Arc<Vocabulary>,
    pub k: usize,
    pub decode: DecodeConfig,
    pub context: ContextMode,
}

impl Generator for ModelGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context(&self) -> ContextMode {
        self.context
    }

    fn generate(&self, state: &SessionState, rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        let set = generate_suggestion_set(&self.model, &self.vocab, state, self.k, &self.decode, Some(rng))
            .map_err(|e| gen_err(&self.id, e))?;
        Ok(Generation::plain(set))
    }
}

/// One-to-one reformulation model decoded with beam search; each of the K
/// beams contributes one suggestion.
pub struct BeamGenerator {
    pub id: String,
    pub model: Arc<PolicyModel>,
    pub vocab: Arc<Vocabulary>,
    pub k: usize,
    pub max_new_tokens: usize,
}

impl Generator for BeamGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context(&self) -> ContextMode {
        ContextMode::Replace
    }

    fn generate(&self, state: &SessionState, _rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        let prompt = build_prompt(state, &self.vocab).map_err(|e| gen_err(&self.id, e))?;
        let cfg = DecodeConfig {
            mode: DecodeMode::Beam,
            beam_width: self.k,
            max_new_tokens: self.max_new_tokens,
            ..DecodeConfig::default()
        };
        let beams = decode(&self.model, &prompt, &cfg, &boundary_stop(1)).map_err(|e| gen_err(&self.id, e))?;
        let mut out: Vec<String> = Vec::new();
        for b in &beams {
            if let Ok(s) = split_generated(b.generated(), &self.vocab, 1, b.log_prob(), b.prompt_len) {
                let text = s.suggestions.into_iter().next().expect("non-empty set");
                if !out.contains(&text) {
                    out.push(text);
                }
            }
        }
        let flag = (out.len() < self.k).then(|| format!("{} distinct beams for K={}", out.len(), self.k));
        Ok(Generation { set: SuggestionSet::from_texts(out, self.k), flag })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub pool_size: usize,
    /// Clusters to form; 0 uses the number of suggestions to select.
    pub n_clusters: usize,
    pub kmeans_iters: usize,
    pub decode: DecodeConfig,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            pool_size: 64,
            n_clusters: 0,
            kmeans_iters: 20,
            decode: DecodeConfig { mode: DecodeMode::Sample, top_k: 20, top_p: 0.9, max_new_tokens: 16, ..DecodeConfig::default() },
        }
    }
}

/// Lloyd's algorithm with a seeded choice of distinct initial centroids.
/// Assignment ties go to the lowest cluster; empty clusters keep their
/// centroid.
pub fn kmeans(points: &[Array1<f64>], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    if n == 0 || k == 0 {
        return vec![0; n];
    }
    let k = k.min(n);
    let mut init = sample(rng, n, k).into_vec();
    init.sort_unstable();
    let mut centroids: Vec<Array1<f64>> = init.iter().map(|&i| points[i].clone()).collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, m) in centroids.iter().enumerate() {
                let d = (p - m).mapv(|x| x * x).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if assign[i] != best.1 {
                assign[i] = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, m) in centroids.iter_mut().enumerate() {
            let members: Vec<&Array1<f64>> = points.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let mut sum = Array1::zeros(m.len());
                for p in &members {
                    sum += *p;
                }
                *m = sum / members.len() as f64;
            }
        }
    }
    assign
}

/// Samples a pool of single suggestions, clusters their embeddings and
/// returns the highest-likelihood member of `k_select` distinct clusters.
/// When fewer clusters are populated the remaining picks come from the best
/// unpicked members, and the result is flagged.
#[allow(clippy::too_many_arguments)]
pub fn pool_cluster_generate(
    model: &PolicyModel,
    vocab: &Vocabulary,
    embedder: &EmbeddingIndex,
    state: &SessionState,
    k_select: usize,
    cfg: &PoolConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation, SimError> {
    let id = "pool_cluster";
    let n_clusters = if cfg.n_clusters == 0 { k_select } else { cfg.n_clusters };
    // fewer clusters than picks is allowed and goes through the flagged fill
    if !(cfg.pool_size >= n_clusters && n_clusters >= 1 && k_select >= 1) {
        return Err(SimError::Config(format!(
            "need pool_size {} >= n_clusters {} >= 1 and k_select {} >= 1",
            cfg.pool_size, n_clusters, k_select
        )));
    }
    let prompt = build_prompt(state, vocab).map_err(|e| gen_err(id, e))?;
    let stop = boundary_stop(1);
    // best log-prob per distinct text, in first-seen order
    let mut pool: Vec<(String, f64)> = Vec::new();
    for _ in 0..cfg.pool_size {
        let d = sample_with(model, &prompt, &cfg.decode, &stop, rng).map_err(|e| gen_err(id, e))?;
        let Ok(s) = split_generated(d.generated(), vocab, 1, d.log_prob(), d.prompt_len) else {
            continue;
        };
        let text = s.suggestions.into_iter().next().expect("non-empty set");
        match pool.iter_mut().find(|(t, _)| *t == text) {
            Some(entry) => entry.1 = entry.1.max(d.log_prob()),
            None => pool.push((text, d.log_prob())),
        }
    }
    let pool: Vec<(String, f64, Array1<f64>)> =
        pool.into_iter().filter_map(|(t, lp)| embedder.embed(&t).map(|e| (t, lp, e))).collect();
    let points: Vec<Array1<f64>> = pool.iter().map(|(_, _, e)| e.clone()).collect();
    let assign = kmeans(&points, n_clusters, cfg.kmeans_iters, rng);

    let mut by_score: Vec<usize> = (0..pool.len()).collect();
    by_score.sort_by(|&a, &b| pool[b].1.total_cmp(&pool[a].1).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::new();
    let mut used_clusters: Vec<usize> = Vec::new();
    for &i in &by_score {
        if picked.len() == k_select {
            break;
        }
        if !used_clusters.contains(&assign[i]) {
            used_clusters.push(assign[i]);
            picked.push(i);
        }
    }
    let mut flag = None;
    if picked.len() < k_select {
        flag = Some(format!("{} populated clusters for {k_select} picks", used_clusters.len()));
        for &i in &by_score {
            if picked.len() == k_select {
                break;
            }
            if !picked.contains(&i) {
                picked.push(i);
            }
        }
    }
    if picked.len() < k_select {
        flag = Some(format!("{} unique suggestions in pool of {}", pool.len(), cfg.pool_size));
    }
    let texts = picked.into_iter().map(|i| pool[i].0.clone()).collect();
    Ok(Generation { set: SuggestionSet::from_texts(texts, k_select), flag })
}

pub struct PoolClusterGenerator {
    pub id: String,
    pub model: Arc<PolicyModel>,
    pub vocab: Arc<Vocabulary>,
    pub embedder: Arc<EmbeddingIndex>,
    pub k: usize,
    pub cfg: PoolConfig,
}

impl Generator for PoolClusterGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context(&self) -> ContextMode {
        ContextMode::Replace
    }

    fn generate(&self, state: &SessionState, rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        pool_cluster_generate(&self.model, &self.vocab, &self.embedder, state, self.k, &self.cfg, rng)
    }
}

/// Canned suggestions keyed by the current query.
pub struct FixtureGenerator {
    pub id: String,
    pub k: usize,
    pub map: BTreeMap<String, Vec<String>>,
}

impl Generator for FixtureGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context(&self) -> ContextMode {
        ContextMode::Replace
    }

    fn generate(&self, state: &SessionState, _rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        let mut s = self.map.get(state.current_query()).cloned().unwrap_or_default();
        s.truncate(self.k);
        Ok(Generation::plain(SuggestionSet::from_texts(s, self.k)))
    }
}

/// Web search suggestions; keeps at most `k` of what the service returns.
pub struct ExternalGenerator {
    pub id: String,
    pub k: usize,
    pub client: Arc<ExternalClient>,
}

impl Generator for ExternalGenerator {
    fn id(&self) -> &str {
        &self.id
    }

    fn k(&self) -> usize {
        self.k
    }

    fn context(&self) -> ContextMode {
        ContextMode::Replace
    }

    fn generate(&self, state: &SessionState, _rng: &mut ChaCha8Rng) -> Result<Generation, SimError> {
        let mut s = self.client.suggest(state.current_query())?;
        s.truncate(self.k);
        Ok(Generation::plain(SuggestionSet::from_texts(s, self.k)))
    }
}
