//! Diversity fine-tuning with PPO: sample suggestion sets, score them by the
//! negated pairwise RBO of their retrieved rankings minus a KL penalty to the
//! frozen reference, and apply the clipped policy update plus a value
//! regression toward the sequence reward.

mod cache;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

pub use cache::RetrievalCache;

use crate::metrics::{dissimilarity_reward, RboConfig};
use crate::policy::{generate_suggestion_set, PolicyError, SessionState, SuggestionSet};
use crate::retrieval::{Ranking, Retriever};
use crate::seqmodel::checkpoint::{self, CheckpointError, Stage};
use crate::seqmodel::model::log_sum_exp;
use crate::seqmodel::{Adam, AdamConfig, DecodeConfig, DecodeMode, Gradients, ModelError, PolicyModel, TokenId, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at step {step}, token {token}: ratio {ratio}")]
    NonFinite { step: usize, token: usize, ratio: f64 },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn default_decode() -> DecodeConfig {
    DecodeConfig { mode: DecodeMode::Sample, top_k: 20, top_p: 0.9, max_new_tokens: 32, ..DecodeConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    /// KL coefficient.
    pub beta: f64,
    pub clip_epsilon: f64,
    pub lr: f64,
    /// Learning rate of the value head.
    pub value_lr: f64,
    /// Trajectories per rollout.
    pub batch: usize,
    /// Trajectories per gradient step; 0 uses the whole batch.
    pub minibatch: usize,
    pub epochs_per_batch: usize,
    /// Suggestions per set.
    pub k: usize,
    pub decode: DecodeConfig,
    pub max_steps: usize,
    pub seed: u64,
    pub normalize_advantages: bool,
    /// Score sets that are not well-formed as `-K(K-1)` instead of by RBO.
    pub malformed_penalty: bool,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub cache_capacity: usize,
    pub collapse_threshold: f64,
    pub collapse_patience: usize,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.01,
            clip_epsilon: 0.1,
            lr: 0.8e-6,
            value_lr: 1e-3,
            batch: 128,
            minibatch: 0,
            epochs_per_batch: 4,
            k: 2,
            decode: default_decode(),
            max_steps: 100,
            seed: 0,
            normalize_advantages: true,
            malformed_penalty: true,
            checkpoint_every: 0,
            cache_capacity: 4096,
            collapse_threshold: 0.5,
            collapse_patience: 3,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.beta >= 0.0) {
            return bad("beta must be >= 0");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.batch == 0 || self.k == 0 || self.epochs_per_batch == 0 {
            return bad("batch, k and epochs_per_batch must be >= 1");
        }
        if !(self.lr >= 0.0 && self.value_lr >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        self.decode.validate().map_err(|e| PpoError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_dissim: f64,
    /// Sum over generated tokens of `log pi - log pi_ref`.
    pub kl_term: f64,
    pub total: f64,
    pub malformed: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub query: String,
    /// Prompt followed by generated tokens.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    /// Per generated token, under the policy at rollout time.
    pub old_log_probs: Vec<f64>,
    pub ref_log_probs: Vec<f64>,
    /// `V(s_t)` for the state preceding each generated token.
    pub values: Vec<f64>,
    pub rankings: Vec<Ranking>,
    pub set: SuggestionSet,
    pub reward: RewardBreakdown,
}

impl Trajectory {
    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }
}

#[derive(Debug)]
pub struct RolloutBatch {
    pub trajectories: Vec<Trajectory>,
    pub skipped: usize,
}

/// Log-probabilities and values for the generated part of `tokens`.
fn score_generated(model: &PolicyModel, tokens: &[TokenId], prompt_len: usize) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let pass = model.forward(tokens)?;
    let mut lps = Vec::with_capacity(tokens.len() - prompt_len);
    let mut vals = Vec::with_capacity(tokens.len() - prompt_len);
    for t in prompt_len..tokens.len() {
        let row = pass.logits.row(t - 1);
        lps.push(row[tokens[t] as usize] - log_sum_exp(row));
        vals.push(pass.values[t - 1]);
    }
    Ok((lps, vals))
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &PolicyModel,
    reference: &PolicyModel,
    vocab: &Vocabulary,
    queries: &[String],
    cfg: &PpoConfig,
    rbo: &RboConfig,
    index: &dyn Retriever,
    cache: &RetrievalCache,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, PpoError> {
    let mut trajectories = Vec::with_capacity(queries.len());
    let mut skipped = 0;
    for q in queries {
        let state = SessionState::new(q.clone());
        let set = match generate_suggestion_set(policy, vocab, &state, cfg.k, &cfg.decode, Some(rng)) {
            Ok(s) => s,
            Err(PolicyError::GenerationFailure { raw }) => {
                warn!(query = %q, %raw, "generation failure; trajectory skipped");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let prompt_len = set.prompt_len;
        let mut tokens = crate::policy::build_prompt(&state, vocab)
            .map_err(PolicyError::from)?
            .into_inner();
        tokens.extend_from_slice(&set.generated);
        let (old_log_probs, values) = score_generated(policy, &tokens, prompt_len)?;
        let (ref_log_probs, _) = score_generated(reference, &tokens, prompt_len)?;
        let rankings = set
            .suggestions
            .iter()
            .map(|s| (*cache.search(index, s, rbo.eval_depth)).clone())
            .collect();
        let mut traj = Trajectory {
            query: q.clone(),
            tokens,
            prompt_len,
            old_log_probs,
            ref_log_probs,
            values,
            rankings,
            set,
            reward: RewardBreakdown { r_dissim: 0.0, kl_term: 0.0, total: 0.0, malformed: false },
        };
        traj.reward = compute_reward(&traj, cfg, rbo);
        trajectories.push(traj);
    }
    Ok(RolloutBatch { trajectories, skipped })
}

pub fn compute_reward(traj: &Trajectory, cfg: &PpoConfig, rbo: &RboConfig) -> RewardBreakdown {
    let malformed = !traj.set.is_well_formed();
    let r_dissim = if malformed && cfg.malformed_penalty {
        -((cfg.k * cfg.k.saturating_sub(1)) as f64)
    } else {
        dissimilarity_reward(&traj.rankings, rbo)
    };
    let kl_term: f64 = traj.old_log_probs.iter().zip(&traj.ref_log_probs).map(|(p, r)| p - r).sum();
    RewardBreakdown { r_dissim, kl_term, total: r_dissim - cfg.beta * kl_term, malformed }
}

/// `A_t = R - V(s_t)` for every generated position.
pub fn compute_advantages(traj: &Trajectory) -> Vec<f64> {
    traj.values.iter().map(|v| traj.reward.total - v).collect()
}

/// `min(A r, A clip(r, 1-eps, 1+eps))`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (advantage * ratio).min(advantage * ratio.clamp(1.0 - eps, 1.0 + eps))
}

/// One trajectory's worth of input to the surrogate.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateSample<'a> {
    pub tokens: &'a [TokenId],
    pub prompt_len: usize,
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    /// Regression target for the value head, with its loss weight.
    pub value_target: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurrogateStats {
    /// Sum of per-token clipped objectives.
    pub objective: f64,
    pub tokens: usize,
    pub clipped: usize,
    /// Sum of squared value errors.
    pub value_loss: f64,
}

/// Evaluates the clipped surrogate for one sample and, when `grads` is
/// given, accumulates the gradient of `-objective * policy_scale` plus
/// `value_weight * sum (R - V)^2`.
pub fn surrogate(
    model: &PolicyModel,
    s: &SurrogateSample<'_>,
    eps: f64,
    policy_scale: f64,
    grads: Option<&mut Gradients>,
) -> Result<SurrogateStats, PpoError> {
    let pass = model.forward(s.tokens)?;
    let mut stats = SurrogateStats::default();
    let mut dlogits = Array2::zeros(pass.logits.dim());
    let mut dvalues = Array1::zeros(pass.values.len());
    for (j, t) in (s.prompt_len..s.tokens.len()).enumerate() {
        let row = pass.logits.row(t - 1);
        let z = log_sum_exp(row);
        let tok = s.tokens[t] as usize;
        let ratio = (row[tok] - z - s.old_log_probs[j]).exp();
        if !ratio.is_finite() {
            return Err(PpoError::NonFinite { step: 0, token: j, ratio });
        }
        let a = s.advantages[j];
        stats.objective += clipped_objective(ratio, a, eps);
        stats.tokens += 1;
        stats.clipped += usize::from((ratio - 1.0).abs() > eps);
        // the unclipped branch is the active one when it is the minimum
        let active = a * ratio <= a * ratio.clamp(1.0 - eps, 1.0 + eps);
        if active && a != 0.0 {
            let g = -policy_scale * a * ratio;
            let mut d = dlogits.row_mut(t - 1);
            d.assign(&row.mapv(|v| -g * (v - z).exp()));
            d[tok] += g;
        }
        if let Some((target, weight)) = s.value_target {
            let v = pass.values[t - 1];
            stats.value_loss += (target - v).powi(2);
            dvalues[t - 1] = 2.0 * weight * (v - target);
        }
    }
    if let Some(g) = grads {
        model.backward(&pass, dlogits.view(), s.value_target.map(|_| dvalues.view()), g);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub clip_frac: f64,
    pub policy_objective: f64,
    pub value_loss: f64,
}

fn whiten(advs: &mut [Vec<f64>]) {
    let all: Vec<f64> = advs.iter().flatten().copied().collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advs.iter_mut().flatten() {
        *a = if std > 1e-8 { (*a - mean) / std } else { *a - mean };
    }
}

/// Runs `epochs_per_batch` passes of clipped-surrogate ascent and value
/// regression over `trajs`, whose log-probs are the `pi_old` snapshot.
pub fn ppo_update(
    policy: &mut PolicyModel,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<UpdateStats, PpoError> {
    if trajs.is_empty() {
        return Ok(UpdateStats { clip_frac: 0.0, policy_objective: 0.0, value_loss: 0.0 });
    }
    let mut advs: Vec<Vec<f64>> = trajs.iter().map(compute_advantages).collect();
    if cfg.normalize_advantages {
        whiten(&mut advs);
    }
    let mb = if cfg.minibatch == 0 { trajs.len() } else { cfg.minibatch.min(trajs.len()) };
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let mut grads = policy.zero_grads();
    let (mut tok, mut clipped, mut obj, mut vloss, mut n_traj) = (0usize, 0usize, 0.0, 0.0, 0usize);
    for _ in 0..cfg.epochs_per_batch {
        order.shuffle(rng);
        for chunk in order.chunks(mb) {
            grads.fill_zero();
            let n_tok: usize = chunk.iter().map(|&i| trajs[i].generated_len()).sum();
            if n_tok == 0 {
                continue;
            }
            for &i in chunk {
                let t = &trajs[i];
                let sample = SurrogateSample {
                    tokens: &t.tokens,
                    prompt_len: t.prompt_len,
                    old_log_probs: &t.old_log_probs,
                    advantages: &advs[i],
                    value_target: Some((t.reward.total, 1.0 / chunk.len() as f64)),
                };
                let s = surrogate(policy, &sample, cfg.clip_epsilon, 1.0 / n_tok as f64, Some(&mut grads))
                    .map_err(|e| match e {
                        PpoError::NonFinite { token, ratio, .. } => PpoError::NonFinite { step, token, ratio },
                        e => e,
                    })?;
                tok += s.tokens;
                clipped += s.clipped;
                obj += s.objective;
                vloss += s.value_loss;
                n_traj += 1;
            }
            if grads.as_slice().iter().any(|g| !g.is_finite()) {
                return Err(PpoError::NonFinite { step, token: 0, ratio: f64::NAN });
            }
            opt.step(policy.params_mut(), &grads);
        }
    }
    Ok(UpdateStats {
        clip_frac: clipped as f64 / tok.max(1) as f64,
        policy_objective: obj / tok.max(1) as f64,
        value_loss: vloss / n_traj.max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoLogRow {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_r_dissim: f64,
    pub mean_kl: f64,
    pub clip_frac: f64,
    pub wellformed_rate: f64,
}

pub const LOG_HEADER: &str = "step,mean_reward,mean_r_dissim,mean_kl,clip_frac,wellformed_rate";

pub fn write_log_csv(rows: &[PpoLogRow], path: &Path) -> Result<(), PpoError> {
    let io = |source| PpoError::Io { path: path.to_owned(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    writeln!(f, "{LOG_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.mean_reward, r.mean_r_dissim, r.mean_kl, r.clip_frac, r.wellformed_rate
        )
        .map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PpoOutcome {
    pub model: PolicyModel,
    pub log: Vec<PpoLogRow>,
    pub collapsed: bool,
    pub checkpoints: Vec<PathBuf>,
    pub cache_hit_rate: f64,
    pub skipped: usize,
}

/// Where and how often `train_ppo` saves intermediate checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct CheckpointSink<'a> {
    pub dir: &'a Path,
    pub vocab: &'a Vocabulary,
}

#[allow(clippy::too_many_arguments)]
pub fn train_ppo(
    sft: &PolicyModel,
    vocab: &Vocabulary,
    prompts: &[String],
    index: &dyn Retriever,
    cfg: &PpoConfig,
    rbo: &RboConfig,
    sink: Option<CheckpointSink<'_>>,
) -> Result<PpoOutcome, PpoError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(PpoError::Config("no training prompts".into()));
    }
    let mut policy = sft.clone();
    let mut opt = Adam::new(policy.num_params(), cfg.lr, cfg.adam);
    opt.set_group_lr(policy.value_range(), cfg.value_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cache = RetrievalCache::new(cfg.cache_capacity);
    let mut log = Vec::with_capacity(cfg.max_steps);
    let mut checkpoints = Vec::new();
    let mut low_streak = 0;
    let mut collapsed = false;
    let mut skipped = 0;
    for step in 0..cfg.max_steps {
        let queries: Vec<String> = (0..cfg.batch)
            .map(|_| prompts.choose(&mut rng).expect("non-empty").clone())
            .collect();
        let batch = rollout(&policy, sft, vocab, &queries, cfg, rbo, index, &cache, &mut rng)?;
        skipped += batch.skipped;
        let trajs = &batch.trajectories;
        let n = trajs.len().max(1) as f64;
        let attempted = (trajs.len() + batch.skipped).max(1) as f64;
        let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(f).sum::<f64>() / n;
        let wellformed = trajs.iter().filter(|t| t.set.is_well_formed()).count() as f64 / attempted;
        let mut row = PpoLogRow {
            step,
            mean_reward: mean(&|t| t.reward.total),
            mean_r_dissim: mean(&|t| t.reward.r_dissim),
            mean_kl: mean(&|t| t.reward.kl_term),
            clip_frac: 0.0,
            wellformed_rate: wellformed,
        };
        let upd = ppo_update(&mut policy, trajs, cfg, &mut opt, &mut rng, step)?;
        row.clip_frac = upd.clip_frac;
        info!(
            step,
            reward = row.mean_reward,
            r_dissim = row.mean_r_dissim,
            kl = row.mean_kl,
            clip = row.clip_frac,
            wellformed = row.wellformed_rate,
            "ppo step"
        );
        log.push(row);
        if let Some(sink) = sink {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = sink.dir.join(format!("ppo-step{:05}.ckpt", step + 1));
                checkpoint::save(&path, &policy, sink.vocab, Stage::Ppo, serde_json::json!({ "step": step + 1 }))?;
                checkpoints.push(path);
            }
        }
        low_streak = if wellformed < cfg.collapse_threshold { low_streak + 1 } else { 0 };
        if low_streak >= cfg.collapse_patience {
            warn!(step, "policy collapse: well-formedness below threshold; aborting");
            collapsed = true;
            break;
        }
    }
    Ok(PpoOutcome { model: policy, log, collapsed, checkpoints, cache_hit_rate: cache.hit_rate(), skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_hand_values() {
        assert!((clipped_objective(1.3, 1.0, 0.1) - 1.1).abs() < 1e-12);
        assert!((clipped_objective(1.3, -1.0, 0.1) + 1.3).abs() < 1e-12);
        assert_eq!(clipped_objective(1.0, 0.7, 0.1), 0.7);
    }

    #[test]
    fn whitening() {
        let mut a = vec![vec![1.0, 2.0], vec![3.0]];
        whiten(&mut a);
        let flat: Vec<f64> = a.into_iter().flatten().collect();
        assert!(flat.iter().sum::<f64>().abs() < 1e-12);
        let mut c = vec![vec![0.5, 0.5]];
        whiten(&mut c);
        assert_eq!(c, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { clip_epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(PpoConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }
}
