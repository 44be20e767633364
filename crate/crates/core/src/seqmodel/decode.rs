//! Greedy, top-k/top-p sampling and beam decoding over the KV cache.

use std::cmp::Ordering;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{log_sum_exp, InferenceState, ModelError, PolicyModel};
use super::vocab::{TokenId, TokenSequence, BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("prompt must start with <bos>")]
    PromptWithoutBos,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub top_p: f64,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Greedy, top_k: 20, top_p: 0.9, beam_width: 4, max_new_tokens: 48, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { mode: DecodeMode::Greedy, max_new_tokens, ..Self::default() }
    }

    pub fn sample(seed: u64, max_new_tokens: usize) -> Self {
        Self { mode: DecodeMode::Sample, seed, max_new_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(DecodeError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.beam_width < 1 {
            return Err(DecodeError::Config("beam_width must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(DecodeError::Config("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Predicate,
    MaxNewTokens,
    MaxLen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Prompt followed by the generated tokens.
    pub tokens: TokenSequence,
    pub prompt_len: usize,
    /// Unfiltered model log-probabilities of each generated token.
    pub token_log_probs: Vec<f64>,
    pub stop: StopReason,
}

impl Decoded {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn log_prob(&self) -> f64 {
        self.token_log_probs.iter().sum()
    }
}

/// Decides, given the tokens generated so far, whether to stop.
pub type StopFn<'a> = &'a dyn Fn(&[TokenId]) -> bool;

pub fn never_stop(_: &[TokenId]) -> bool {
    false
}

/// Log-probabilities with `<pad>` and `<bos>` excluded from the support.
fn masked_log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let mut l = logits.clone();
    l[PAD_ID as usize] = f64::NEG_INFINITY;
    l[BOS_ID as usize] = f64::NEG_INFINITY;
    let z = log_sum_exp(l.view());
    l.mapv(|v| v - z)
}

fn raw_log_prob(logits: &Array1<f64>, tok: TokenId) -> f64 {
    logits[tok as usize] - log_sum_exp(logits.view())
}

fn argmax_lowest_id(lp: &Array1<f64>) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Renormalised top-k then top-p support of a masked distribution, in
/// descending probability (ascending id on ties).
pub fn filtered_support(logits: &Array1<f64>, top_k: usize, top_p: f64) -> Vec<(TokenId, f64)> {
    let lp = masked_log_softmax(logits);
    let mut items: Vec<(TokenId, f64)> = lp
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, v)| (i as TokenId, v.exp()))
        .collect();
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    if top_k > 0 {
        items.truncate(top_k);
    }
    let mut cum = 0.0;
    let mut keep = 0;
    for (_, p) in &items {
        keep += 1;
        cum += p;
        if cum >= top_p {
            break;
        }
    }
    items.truncate(keep.max(1));
    let z: f64 = items.iter().map(|(_, p)| p).sum();
    items.iter_mut().for_each(|(_, p)| *p /= z);
    items
}

fn sample_from(support: &[(TokenId, f64)], rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(t, p) in support {
        cum += p;
        if u < cum {
            return t;
        }
    }
    support.last().expect("non-empty support").0
}

/// Decodes from `prompt` according to `cfg`. Greedy and sample modes return
/// one sequence; beam mode returns `beam_width` sequences by total log-prob.
pub fn decode(model: &PolicyModel, prompt: &[TokenId], cfg: &DecodeConfig, stop: StopFn<'_>) -> Result<Vec<Decoded>, DecodeError> {
    cfg.validate()?;
    match cfg.mode {
        DecodeMode::Greedy => Ok(vec![run_single(model, prompt, cfg, stop, &mut |lp, _| argmax_lowest_id(lp))?]),
        DecodeMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            Ok(vec![sample_with(model, prompt, cfg, stop, &mut rng)?])
        }
        DecodeMode::Beam => beam(model, prompt, cfg, stop),
    }
}

/// Top-k/top-p sampling driven by a caller-owned RNG.
pub fn sample_with(
    model: &PolicyModel,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    stop: StopFn<'_>,
    rng: &mut impl Rng,
) -> Result<Decoded, DecodeError> {
    cfg.validate()?;
    run_single(model, prompt, cfg, stop, &mut |_, logits| {
        sample_from(&filtered_support(logits, cfg.top_k, cfg.top_p), rng)
    })
}

fn check_prompt(model: &PolicyModel, prompt: &[TokenId]) -> Result<(), DecodeError> {
    if prompt.first() != Some(&BOS_ID) {
        return Err(DecodeError::PromptWithoutBos);
    }
    let max_len = model.config().max_len;
    if prompt.len() >= max_len {
        return Err(ModelError::TooLong { len: prompt.len() + 1, max_len }.into());
    }
    Ok(())
}

fn run_single(
    model: &PolicyModel,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    stop: StopFn<'_>,
    pick: &mut dyn FnMut(&Array1<f64>, &Array1<f64>) -> TokenId,
) -> Result<Decoded, DecodeError> {
    check_prompt(model, prompt)?;
    let max_len = model.config().max_len;
    let (mut state, mut out) = model.prefill(prompt)?;
    let mut tokens = prompt.to_vec();
    let mut lps = Vec::new();
    let reason = loop {
        let lp = masked_log_softmax(&out.logits);
        let tok = pick(&lp, &out.logits);
        lps.push(raw_log_prob(&out.logits, tok));
        tokens.push(tok);
        let gen = &tokens[prompt.len()..];
        if tok == EOS_ID {
            break StopReason::Eos;
        }
        if stop(gen) {
            break StopReason::Predicate;
        }
        if gen.len() >= cfg.max_new_tokens {
            break StopReason::MaxNewTokens;
        }
        if tokens.len() >= max_len {
            break StopReason::MaxLen;
        }
        out = model.step(&mut state, tok)?;
    };
    Ok(Decoded { tokens: tokens.into(), prompt_len: prompt.len(), token_log_probs: lps, stop: reason })
}

struct Beam {
    state: InferenceState,
    logits: Array1<f64>,
    tokens: Vec<TokenId>,
    lps: Vec<f64>,
    score: f64,
    done: Option<StopReason>,
}

fn beam(model: &PolicyModel, prompt: &[TokenId], cfg: &DecodeConfig, stop: StopFn<'_>) -> Result<Vec<Decoded>, DecodeError> {
    check_prompt(model, prompt)?;
    let width = cfg.beam_width;
    let max_len = model.config().max_len;
    let (state, out) = model.prefill(prompt)?;
    let mut beams = vec![Beam { state, logits: out.logits, tokens: prompt.to_vec(), lps: vec![], score: 0.0, done: None }];
    while beams.iter().any(|b| b.done.is_none()) {
        // (parent, token, new score); token None keeps a finished beam
        let mut cands: Vec<(usize, Option<TokenId>, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done.is_some() {
                cands.push((bi, None, b.score));
                continue;
            }
            let lp = masked_log_softmax(&b.logits);
            let mut order: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
            order.sort_by(|&x, &y| lp[y].partial_cmp(&lp[x]).unwrap_or(Ordering::Equal).then(x.cmp(&y)));
            for &t in order.iter().take(width) {
                cands.push((bi, Some(t as TokenId), b.score + lp[t]));
            }
        }
        cands.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        cands.truncate(width);
        let mut next = Vec::with_capacity(width);
        for (bi, tok, score) in cands {
            let parent = &beams[bi];
            let Some(tok) = tok else {
                next.push(Beam {
                    state: parent.state.clone(),
                    logits: parent.logits.clone(),
                    tokens: parent.tokens.clone(),
                    lps: parent.lps.clone(),
                    score,
                    done: parent.done,
                });
                continue;
            };
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            let mut lps = parent.lps.clone();
            lps.push(raw_log_prob(&parent.logits, tok));
            let gen = &tokens[prompt.len()..];
            let done = if tok == EOS_ID {
                Some(StopReason::Eos)
            } else if stop(gen) {
                Some(StopReason::Predicate)
            } else if gen.len() >= cfg.max_new_tokens {
                Some(StopReason::MaxNewTokens)
            } else if tokens.len() >= max_len {
                Some(StopReason::MaxLen)
            } else {
                None
            };
            let mut state = parent.state.clone();
            let logits = if done.is_none() {
                model.step(&mut state, tok)?.logits
            } else {
                parent.logits.clone()
            };
            next.push(Beam { state, logits, tokens, lps, score, done });
        }
        beams = next;
    }
    Ok(beams
        .into_iter()
        .map(|b| Decoded {
            tokens: b.tokens.into(),
            prompt_len: prompt.len(),
            token_log_probs: b.lps,
            stop: b.done.expect("finished"),
        })
        .collect())
}
