//! Suggestion sets on top of the sequence model: prompt assembly from the
//! session context, the boundary-counting stop rule, and parsing.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seqmodel::{
    decode, sample_with, DecodeConfig, DecodeError, DecodeMode, PolicyModel, TokenId, TokenSequence, VocabError,
    Vocabulary, BOS_ID, EOS_ID, PAD_ID, SEP_ID,
};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("sequence contains no <sep>")]
    NoSeparator,
    #[error("sequence does not start with <bos>")]
    NoBos,
    #[error("K must be >= 1")]
    ZeroK,
    #[error("generation produced no parseable suggestion: {raw}")]
    GenerationFailure { raw: String },
}

/// Initial query plus the suggestions the user picked, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub initial_query: String,
    pub selected: Vec<String>,
}

impl SessionState {
    pub fn new(initial_query: impl Into<String>) -> Self {
        Self { initial_query: initial_query.into(), selected: Vec::new() }
    }

    pub fn turn(&self) -> usize {
        self.selected.len()
    }

    pub fn select(&mut self, suggestion: impl Into<String>) {
        self.selected.push(suggestion.into());
    }

    /// Query the user is currently looking at.
    pub fn current_query(&self) -> &str {
        self.selected.last().unwrap_or(&self.initial_query)
    }
}

/// `<bos> x <sep>` at turn 0, `<bos> x <sep> y1 <sep> ... yn <sep>` after.
pub fn build_prompt(state: &SessionState, vocab: &Vocabulary) -> Result<TokenSequence, VocabError> {
    let mut seq = TokenSequence::new(vec![BOS_ID]);
    seq.extend_from_slice(&vocab.tokenize(&state.initial_query)?);
    seq.push(SEP_ID);
    for s in &state.selected {
        seq.extend_from_slice(&vocab.tokenize(s)?);
        seq.push(SEP_ID);
    }
    Ok(seq)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSequence {
    pub query: String,
    pub suggestions: Vec<String>,
    pub dropped_empty: usize,
}

impl ParsedSequence {
    /// Splits the suggestions into the `turn` already selected ones and the
    /// newly generated rest.
    pub fn split_at_turn(&self, turn: usize) -> (SessionState, Vec<String>) {
        let n = turn.min(self.suggestions.len());
        let state = SessionState { initial_query: self.query.clone(), selected: self.suggestions[..n].to_vec() };
        (state, self.suggestions[n..].to_vec())
    }
}

/// Splits on `<sep>`; `<eos>` ends the sequence and `<pad>` is ignored.
/// The first span is the query; empty suggestion spans are dropped.
pub fn parse_suggestions(seq: &[TokenId], vocab: &Vocabulary) -> Result<ParsedSequence, PolicyError> {
    if seq.first() != Some(&BOS_ID) {
        return Err(PolicyError::NoBos);
    }
    let body: Vec<TokenId> = seq[1..]
        .iter()
        .copied()
        .take_while(|&t| t != EOS_ID)
        .filter(|&t| t != PAD_ID)
        .collect();
    if !body.contains(&SEP_ID) {
        return Err(PolicyError::NoSeparator);
    }
    let mut spans = body.split(|&t| t == SEP_ID);
    let query = vocab.detokenize(spans.next().unwrap_or(&[]));
    let mut suggestions = Vec::new();
    let mut dropped_empty = 0;
    let n_spans = body.iter().filter(|&&t| t == SEP_ID).count();
    for (i, span) in spans.enumerate() {
        if span.is_empty() {
            // trailing empty span after a final <sep> is just the boundary
            if i + 1 < n_spans {
                dropped_empty += 1;
            }
            continue;
        }
        suggestions.push(vocab.detokenize(span));
    }
    Ok(ParsedSequence { query, suggestions, dropped_empty })
}

/// A generated set of clarifying queries and how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionSet {
    pub suggestions: Vec<String>,
    /// Token range of each suggestion within `generated`.
    pub spans: Vec<(usize, usize)>,
    pub generated: Vec<TokenId>,
    pub prompt_len: usize,
    pub log_prob: f64,
    pub has_duplicates: bool,
    /// Token budget ran out before K boundaries.
    pub truncated: bool,
    pub dropped_empty: usize,
    pub requested_k: usize,
}

impl SuggestionSet {
    /// Wraps suggestions produced outside the sequence model.
    pub fn from_texts(suggestions: Vec<String>, requested_k: usize) -> Self {
        let has_duplicates = suggestions.iter().collect::<BTreeSet<_>>().len() != suggestions.len();
        Self {
            suggestions,
            spans: Vec::new(),
            generated: Vec::new(),
            prompt_len: 0,
            log_prob: 0.0,
            has_duplicates,
            truncated: false,
            dropped_empty: 0,
            requested_k,
        }
    }

    pub fn len(&self) -> usize {
        self.suggestions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.suggestions.is_empty()
    }

    /// Exactly K non-empty suggestions, each closed by a boundary.
    pub fn is_well_formed(&self) -> bool {
        !self.truncated && self.dropped_empty == 0 && self.suggestions.len() == self.requested_k
    }
}

fn is_boundary(t: TokenId) -> bool {
    t == SEP_ID || t == EOS_ID
}

/// Splits generated tokens into suggestion spans.
pub fn split_generated(
    generated: &[TokenId],
    vocab: &Vocabulary,
    requested_k: usize,
    log_prob: f64,
    prompt_len: usize,
) -> Result<SuggestionSet, PolicyError> {
    let mut suggestions = Vec::new();
    let mut spans = Vec::new();
    let mut dropped_empty = 0;
    let mut start = 0;
    let mut truncated = false;
    let mut closed = false;
    for (i, &t) in generated.iter().enumerate() {
        if is_boundary(t) {
            if i > start {
                suggestions.push(vocab.detokenize(&generated[start..i]));
                spans.push((start, i));
            } else {
                dropped_empty += 1;
            }
            start = i + 1;
            if t == EOS_ID || suggestions.len() + dropped_empty >= requested_k {
                closed = true;
                break;
            }
        }
    }
    if !closed && start < generated.len() {
        suggestions.push(vocab.detokenize(&generated[start..]));
        spans.push((start, generated.len()));
        truncated = true;
    } else if !closed {
        truncated = true;
    }
    if suggestions.is_empty() {
        return Err(PolicyError::GenerationFailure { raw: vocab.detokenize(generated) });
    }
    let has_duplicates = suggestions.iter().collect::<BTreeSet<_>>().len() != suggestions.len();
    Ok(SuggestionSet {
        suggestions,
        spans,
        generated: generated.to_vec(),
        prompt_len,
        log_prob,
        has_duplicates,
        truncated,
        dropped_empty,
        requested_k,
    })
}

/// Stop as soon as K suggestion boundaries have been generated.
pub fn boundary_stop(k: usize) -> impl Fn(&[TokenId]) -> bool {
    move |gen: &[TokenId]| gen.iter().filter(|&&t| is_boundary(t)).count() >= k
}

/// Decodes one suggestion set. Sampling uses `rng` when given, otherwise a
/// generator seeded from `cfg.seed`; beam mode keeps the best beam.
pub fn generate_suggestion_set(
    model: &PolicyModel,
    vocab: &Vocabulary,
    state: &SessionState,
    k: usize,
    cfg: &DecodeConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SuggestionSet, PolicyError> {
    if k == 0 {
        return Err(PolicyError::ZeroK);
    }
    let prompt = build_prompt(state, vocab)?;
    let stop = boundary_stop(k);
    let decoded = match (cfg.mode, rng) {
        (DecodeMode::Sample, Some(rng)) => sample_with(model, &prompt, cfg, &stop, rng)?,
        (DecodeMode::Sample, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            sample_with(model, &prompt, cfg, &stop, &mut rng)?
        }
        _ => decode(model, &prompt, cfg, &stop)?.swap_remove(0),
    };
    split_generated(decoded.generated(), vocab, k, decoded.log_prob(), decoded.prompt_len)
}
