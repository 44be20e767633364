//! Supervised next-token training with `<pad>` targets masked out.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::info;

use super::model::{log_sum_exp, Gradients, ModelError, PolicyModel};
use super::optim::{Adam, AdamConfig};
use super::vocab::{TokenId, TokenSequence, PAD_ID};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty training set")]
    Empty,
    #[error("sequence {index}: {source}")]
    Sequence { index: usize, source: ModelError },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { lr: 2e-5, batch: 128, epochs: 3, seed: 0, adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean token loss over the training set before the first update.
    pub initial_loss: f64,
    /// Running mean token loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean token loss over the training set after the last update.
    pub final_loss: f64,
}

/// Validates every sequence against the model before any training happens.
pub fn assemble_dataset<'a>(model: &PolicyModel, seqs: &'a [TokenSequence]) -> Result<Vec<&'a [TokenId]>, TrainError> {
    if seqs.is_empty() {
        return Err(TrainError::Empty);
    }
    let max_len = model.config().max_len;
    seqs.iter()
        .enumerate()
        .map(|(index, s)| {
            if s.len() < 2 {
                return Err(TrainError::Sequence { index, source: ModelError::Empty });
            }
            if s.len() > max_len {
                return Err(TrainError::Sequence { index, source: ModelError::TooLong { len: s.len(), max_len } });
            }
            if let Some(&id) = s.iter().find(|&&id| id as usize >= model.vocab_size()) {
                return Err(TrainError::Sequence {
                    index,
                    source: ModelError::TokenOutOfRange { id, vocab_size: model.vocab_size() },
                });
            }
            Ok(&s[..])
        })
        .collect()
}

/// Summed cross-entropy of `ids[1..]` and its gradient w.r.t. the logits.
/// Returns `(loss_sum, n_targets, dlogits)`.
pub fn cross_entropy(logits: &Array2<f64>, ids: &[TokenId]) -> (f64, usize, Array2<f64>) {
    let mut d = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut n = 0;
    for t in 1..ids.len() {
        let target = ids[t];
        if target == PAD_ID {
            continue;
        }
        let row = logits.row(t - 1);
        let z = log_sum_exp(row);
        loss -= row[target as usize] - z;
        n += 1;
        let mut drow = d.row_mut(t - 1);
        drow.assign(&row.mapv(|v| (v - z).exp()));
        drow[target as usize] -= 1.0;
    }
    (loss, n, d)
}

/// Mean per-token cross-entropy over `seqs`.
pub fn mean_token_loss(model: &PolicyModel, seqs: &[&[TokenId]]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut n = 0;
    for s in seqs {
        let pass = model.forward(s)?;
        let (l, c, _) = cross_entropy(&pass.logits, s);
        total += l;
        n += c;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn train_supervised(model: &mut PolicyModel, seqs: &[TokenSequence], cfg: &SftConfig) -> Result<SftReport, TrainError> {
    if cfg.batch == 0 || !(cfg.lr >= 0.0) {
        return Err(TrainError::Config("batch must be >= 1 and lr >= 0".into()));
    }
    let data = assemble_dataset(model, seqs)?;
    let wrap = |source| TrainError::Sequence { index: 0, source };
    let initial_loss = mean_token_loss(model, &data).map_err(wrap)?;
    let mut opt = Adam::new(model.num_params(), cfg.lr, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grads = model.zero_grads();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut ep_loss, mut ep_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            grads.fill_zero();
            let mut n_tok = 0;
            for &i in chunk {
                let pass = model.forward(data[i]).map_err(|source| TrainError::Sequence { index: i, source })?;
                let (l, c, d) = cross_entropy(&pass.logits, data[i]);
                model.backward(&pass, d.view(), None, &mut grads);
                ep_loss += l;
                n_tok += c;
            }
            ep_n += n_tok;
            if n_tok == 0 {
                continue;
            }
            grads.scale(1.0 / n_tok as f64);
            opt.step(model.params_mut(), &grads);
        }
        let mean = if ep_n == 0 { 0.0 } else { ep_loss / ep_n as f64 };
        if !mean.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        info!(epoch, loss = mean, "sft epoch");
        epoch_losses.push(mean);
    }
    let final_loss = mean_token_loss(model, &data).map_err(wrap)?;
    Ok(SftReport { initial_loss, epoch_losses, final_loss })
}

/// Accumulates the summed cross-entropy gradient of one sequence, unscaled.
pub fn accumulate_ce_grad(model: &PolicyModel, ids: &[TokenId], grads: &mut Gradients) -> Result<f64, ModelError> {
    let pass = model.forward(ids)?;
    let (loss, _, d) = cross_entropy(&pass.logits, ids);
    model.backward(&pass, d.view(), None, grads);
    Ok(loss)
}
