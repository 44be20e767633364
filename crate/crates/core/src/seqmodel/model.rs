//! Pre-LN causal self-attention decoder with a language-model head and a
//! scalar value head, trained with hand-written backpropagation.
//!
//! All parameters live in one flat `f64` buffer described by a [`Layout`];
//! gradients use the same layout, which keeps the optimizer, checkpoints and
//! finite-difference checks trivial. The value head reads a detached copy of
//! the final hidden state: value-loss gradients only reach the head itself.

use std::ops::Range;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::TokenId;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("empty sequence")]
    Empty,
    #[error("parameter array {name:?}: {reason}")]
    Array { name: String, reason: String },
}

/// Architecture hyperparameters. The vocabulary size comes from the
/// [`Vocabulary`](super::Vocabulary) the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 4, d_model: 128, n_heads: 4, d_ff: 512, max_len: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(ModelError::Config("all sizes must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug)]
struct BlockSlots {
    ln1_g: Slot,
    ln1_b: Slot,
    wq: Slot,
    bq: Slot,
    wk: Slot,
    bk: Slot,
    wv: Slot,
    bv: Slot,
    wo: Slot,
    bo: Slot,
    ln2_g: Slot,
    ln2_b: Slot,
    w1: Slot,
    b1: Slot,
    w2: Slot,
    b2: Slot,
}

#[derive(Debug)]
pub(crate) struct Layout {
    tok_emb: Slot,
    pos_emb: Slot,
    blocks: Vec<BlockSlots>,
    lnf_g: Slot,
    lnf_b: Slot,
    lm_head: Slot,
    value_w: Slot,
    value_b: Slot,
    named: Vec<(String, Slot)>,
    len: usize,
}

#[derive(Default)]
struct LayoutBuilder {
    named: Vec<(String, Slot)>,
    len: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot { offset: self.len, rows, cols };
        self.len += slot.len();
        self.named.push((name.into(), slot));
        slot
    }
}

impl Layout {
    fn new(c: &ModelConfig, vocab_size: usize) -> Self {
        let (d, ff) = (c.d_model, c.d_ff);
        let mut b = LayoutBuilder::default();
        let tok_emb = b.add("tok_emb", vocab_size, d);
        let pos_emb = b.add("pos_emb", c.max_len, d);
        let blocks = (0..c.n_layers)
            .map(|l| BlockSlots {
                ln1_g: b.add(format!("h{l}.ln1.g"), 1, d),
                ln1_b: b.add(format!("h{l}.ln1.b"), 1, d),
                wq: b.add(format!("h{l}.attn.wq"), d, d),
                bq: b.add(format!("h{l}.attn.bq"), 1, d),
                wk: b.add(format!("h{l}.attn.wk"), d, d),
                bk: b.add(format!("h{l}.attn.bk"), 1, d),
                wv: b.add(format!("h{l}.attn.wv"), d, d),
                bv: b.add(format!("h{l}.attn.bv"), 1, d),
                wo: b.add(format!("h{l}.attn.wo"), d, d),
                bo: b.add(format!("h{l}.attn.bo"), 1, d),
                ln2_g: b.add(format!("h{l}.ln2.g"), 1, d),
                ln2_b: b.add(format!("h{l}.ln2.b"), 1, d),
                w1: b.add(format!("h{l}.mlp.w1"), d, ff),
                b1: b.add(format!("h{l}.mlp.b1"), 1, ff),
                w2: b.add(format!("h{l}.mlp.w2"), ff, d),
                b2: b.add(format!("h{l}.mlp.b2"), 1, d),
            })
            .collect();
        let lnf_g = b.add("lnf.g", 1, d);
        let lnf_b = b.add("lnf.b", 1, d);
        let lm_head = b.add("lm_head", d, vocab_size);
        // value head last: `value_range` relies on it
        let value_w = b.add("value.w", 1, d);
        let value_b = b.add("value.b", 1, 1);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
            value_w,
            value_b,
            named: b.named,
            len: b.len,
        }
    }
}

fn mat(buf: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &buf[s.range()]).expect("slot shape")
}

fn vecv(buf: &[f64], s: Slot) -> ArrayView1<'_, f64> {
    ArrayView1::from(&buf[s.range()])
}

fn mat_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut buf[s.range()]).expect("slot shape")
}

fn vec_mut(buf: &mut [f64], s: Slot) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut buf[s.range()])
}

/// Gradient buffer with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    att: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    m: Array2<f64>,
}

/// Activations of one full-sequence forward pass, kept for backprop.
pub struct ForwardPass {
    ids: Vec<TokenId>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hidden: Array2<f64>,
    /// `[T, V]` next-token logits; row `t` predicts token `t + 1`.
    pub logits: Array2<f64>,
    /// `[T]` value estimates; entry `t` is V of the prefix ending at `t`.
    pub values: Array1<f64>,
}

impl ForwardPass {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Final (post-LayerNorm) hidden states, `[T, d_model]`.
    pub fn hidden(&self) -> ArrayView2<'_, f64> {
        self.hidden.view()
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct InferenceState {
    keys: Vec<Array2<f64>>,
    vals: Vec<Array2<f64>>,
    len: usize,
}

impl InferenceState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Array1<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    config: ModelConfig,
    vocab_size: usize,
    layout: Arc<Layout>,
    params: Vec<f64>,
}

impl PolicyModel {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ModelError::Config("vocab_size must be >= 1".into()));
        }
        let layout = Layout::new(&config, vocab_size);
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid = Normal::new(0.0, INIT_STD / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut fill = |s: Slot, dist: &Normal<f64>, rng: &mut ChaCha8Rng| {
            params[s.range()].iter_mut().for_each(|p| *p = dist.sample(rng));
        };
        fill(layout.tok_emb, &normal, &mut rng);
        fill(layout.pos_emb, &normal, &mut rng);
        for b in &layout.blocks {
            fill(b.wq, &normal, &mut rng);
            fill(b.wk, &normal, &mut rng);
            fill(b.wv, &normal, &mut rng);
            fill(b.wo, &resid, &mut rng);
            fill(b.w1, &normal, &mut rng);
            fill(b.w2, &resid, &mut rng);
        }
        fill(layout.lm_head, &normal, &mut rng);
        let gains: Vec<Slot> = layout
            .blocks
            .iter()
            .flat_map(|b| [b.ln1_g, b.ln2_g])
            .chain([layout.lnf_g])
            .collect();
        for g in gains {
            params[g.range()].iter_mut().for_each(|p| *p = 1.0);
        }
        Ok(Self { config, vocab_size, layout: Arc::new(layout), params })
    }

    /// Rebuilds a model from named arrays, e.g. a checkpoint payload.
    pub fn from_named_arrays(
        config: ModelConfig,
        vocab_size: usize,
        arrays: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, vocab_size, 0)?;
        if arrays.len() != model.layout.named.len() {
            return Err(ModelError::Array {
                name: "*".into(),
                reason: format!("expected {} arrays, found {}", model.layout.named.len(), arrays.len()),
            });
        }
        let layout = Arc::clone(&model.layout);
        for ((name, slot), (got_name, shape, data)) in layout.named.iter().zip(arrays) {
            if name != got_name {
                return Err(ModelError::Array { name: got_name.clone(), reason: format!("expected {name:?}") });
            }
            if shape.as_slice() != [slot.rows, slot.cols] || data.len() != slot.len() {
                return Err(ModelError::Array {
                    name: name.clone(),
                    reason: format!("shape {shape:?} != [{}, {}]", slot.rows, slot.cols),
                });
            }
            model.params[slot.range()].copy_from_slice(data);
        }
        Ok(model)
    }

    pub fn named_arrays(&self) -> impl Iterator<Item = (&str, [usize; 2], &[f64])> {
        self.layout
            .named
            .iter()
            .map(|(n, s)| (n.as_str(), [s.rows, s.cols], &self.params[s.range()]))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Index range of the value-head parameters inside the flat buffer.
    pub fn value_range(&self) -> Range<usize> {
        self.layout.value_w.offset..self.layout.len
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros(self.params.len())
    }

    pub fn token_embedding(&self, id: TokenId) -> ArrayView1<'_, f64> {
        let s = self.layout.tok_emb;
        let start = s.offset + id as usize * s.cols;
        ArrayView1::from(&self.params[start..start + s.cols])
    }

    fn check_input(&self, ids: &[TokenId]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: ids.len(), max_len: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: self.vocab_size });
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[TokenId]) -> Result<ForwardPass, ModelError> {
        self.check_input(ids)?;
        let (p, l) = (&self.params[..], &*self.layout);
        let t = ids.len();
        let tok = mat(p, l.tok_emb);
        let pos = mat(p, l.pos_emb);
        let mut x = Array2::zeros((t, self.config.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(i);
        }
        let mut blocks = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let (h1, ln1) = layer_norm(&x, vecv(p, b.ln1_g), vecv(p, b.ln1_b));
            let q = h1.dot(&mat(p, b.wq)) + &vecv(p, b.bq);
            let k = h1.dot(&mat(p, b.wk)) + &vecv(p, b.bk);
            let v = h1.dot(&mat(p, b.wv)) + &vecv(p, b.bv);
            let (o, att) = causal_attention(&q, &k, &v, self.config.n_heads);
            x += &(o.dot(&mat(p, b.wo)) + &vecv(p, b.bo));
            let (h2, ln2) = layer_norm(&x, vecv(p, b.ln2_g), vecv(p, b.ln2_b));
            let u = h2.dot(&mat(p, b.w1)) + &vecv(p, b.b1);
            let m = u.mapv(gelu);
            x += &(m.dot(&mat(p, b.w2)) + &vecv(p, b.b2));
            blocks.push(BlockCache { ln1, h1, q, k, v, att, o, ln2, h2, u, m });
        }
        let (hidden, lnf) = layer_norm(&x, vecv(p, l.lnf_g), vecv(p, l.lnf_b));
        let logits = hidden.dot(&mat(p, l.lm_head));
        let values = hidden.dot(&vecv(p, l.value_w)) + p[l.value_b.offset];
        Ok(ForwardPass { ids: ids.to_vec(), blocks, lnf, hidden, logits, values })
    }

    /// Accumulates parameter gradients into `grads` given upstream gradients
    /// for the logits and (optionally) the value estimates.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dlogits: ArrayView2<'_, f64>,
        dvalues: Option<ArrayView1<'_, f64>>,
        grads: &mut Gradients,
    ) {
        let (p, l) = (&self.params[..], &*self.layout);
        let g = grads.as_mut_slice();
        let heads = self.config.n_heads;

        general_mat_mul(1.0, &pass.hidden.t(), &dlogits, 1.0, &mut mat_mut(g, l.lm_head));
        let dhidden = dlogits.dot(&mat(p, l.lm_head).t());
        if let Some(dv) = dvalues {
            vec_mut(g, l.value_w).scaled_add(1.0, &pass.hidden.t().dot(&dv));
            g[l.value_b.offset] += dv.sum();
        }
        let mut dx = layer_norm_backward(&dhidden, &pass.lnf, vecv(p, l.lnf_g), g, l.lnf_g, l.lnf_b);

        for (b, c) in l.blocks.iter().zip(&pass.blocks).rev() {
            general_mat_mul(1.0, &c.m.t(), &dx, 1.0, &mut mat_mut(g, b.w2));
            vec_mut(g, b.b2).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let mut du = dx.dot(&mat(p, b.w2).t());
            Zip::from(&mut du).and(&c.u).for_each(|d, &u| *d *= gelu_grad(u));
            general_mat_mul(1.0, &c.h2.t(), &du, 1.0, &mut mat_mut(g, b.w1));
            vec_mut(g, b.b1).scaled_add(1.0, &du.sum_axis(Axis(0)));
            let dh2 = du.dot(&mat(p, b.w1).t());
            dx += &layer_norm_backward(&dh2, &c.ln2, vecv(p, b.ln2_g), g, b.ln2_g, b.ln2_b);

            general_mat_mul(1.0, &c.o.t(), &dx, 1.0, &mut mat_mut(g, b.wo));
            vec_mut(g, b.bo).scaled_add(1.0, &dx.sum_axis(Axis(0)));
            let d_o = dx.dot(&mat(p, b.wo).t());
            let (dq, dk, dv) = causal_attention_backward(&d_o, c, heads);
            let mut dh1 = Array2::zeros(c.h1.dim());
            for (dproj, w, bias) in [(&dq, b.wq, b.bq), (&dk, b.wk, b.bk), (&dv, b.wv, b.bv)] {
                general_mat_mul(1.0, &c.h1.t(), dproj, 1.0, &mut mat_mut(g, w));
                vec_mut(g, bias).scaled_add(1.0, &dproj.sum_axis(Axis(0)));
                general_mat_mul(1.0, dproj, &mat(p, w).t(), 1.0, &mut dh1);
            }
            dx += &layer_norm_backward(&dh1, &c.ln1, vecv(p, b.ln1_g), g, b.ln1_g, b.ln1_b);
        }

        for (i, &id) in pass.ids.iter().enumerate() {
            let row = dx.row(i);
            mat_mut(g, l.tok_emb).row_mut(id as usize).scaled_add(1.0, &row);
            mat_mut(g, l.pos_emb).row_mut(i).scaled_add(1.0, &row);
        }
    }

    /// `log π(w_t | w_<t)` for t = 1..T; one entry per predicted position.
    pub fn log_probs(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::Config("log_probs needs at least 2 tokens".into()));
        }
        let pass = self.forward(ids)?;
        Ok(token_log_probs(&pass.logits, ids))
    }

    /// One value estimate per position.
    pub fn values(&self, ids: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(ids)?.values.to_vec())
    }

    pub fn start_inference(&self) -> InferenceState {
        let shape = (self.config.max_len, self.config.d_model);
        InferenceState {
            keys: vec![Array2::zeros(shape); self.config.n_layers],
            vals: vec![Array2::zeros(shape); self.config.n_layers],
            len: 0,
        }
    }

    /// Feeds one token through the cached decoder; returns the next-token
    /// logits and the value of the extended prefix.
    pub fn step(&self, state: &mut InferenceState, token: TokenId) -> Result<StepOutput, ModelError> {
        let pos = state.len;
        if pos >= self.config.max_len {
            return Err(ModelError::TooLong { len: pos + 1, max_len: self.config.max_len });
        }
        if token as usize >= self.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: token, vocab_size: self.vocab_size });
        }
        let (p, l) = (&self.params[..], &*self.layout);
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = &mat(p, l.tok_emb).row(token as usize) + &mat(p, l.pos_emb).row(pos);
        for (li, b) in l.blocks.iter().enumerate() {
            let h = layer_norm_row(x.view(), vecv(p, b.ln1_g), vecv(p, b.ln1_b));
            let q = h.dot(&mat(p, b.wq)) + &vecv(p, b.bq);
            state.keys[li].row_mut(pos).assign(&(h.dot(&mat(p, b.wk)) + &vecv(p, b.bk)));
            state.vals[li].row_mut(pos).assign(&(h.dot(&mat(p, b.wv)) + &vecv(p, b.bv)));
            let keys = state.keys[li].slice(s![..=pos, ..]);
            let vals = state.vals[li].slice(s![..=pos, ..]);
            let mut o = Array1::zeros(self.config.d_model);
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let qh = q.slice(s![cols.clone()]);
                let mut sc = keys.slice(s![.., cols.clone()]).dot(&qh) * scale;
                softmax_in_place(sc.view_mut());
                o.slice_mut(s![cols.clone()]).assign(&vals.slice(s![.., cols]).t().dot(&sc));
            }
            x += &(o.dot(&mat(p, b.wo)) + &vecv(p, b.bo));
            let h2 = layer_norm_row(x.view(), vecv(p, b.ln2_g), vecv(p, b.ln2_b));
            let m = (h2.dot(&mat(p, b.w1)) + &vecv(p, b.b1)).mapv(gelu);
            x += &(m.dot(&mat(p, b.w2)) + &vecv(p, b.b2));
        }
        let hidden = layer_norm_row(x.view(), vecv(p, l.lnf_g), vecv(p, l.lnf_b));
        state.len += 1;
        Ok(StepOutput {
            logits: hidden.dot(&mat(p, l.lm_head)),
            value: hidden.dot(&vecv(p, l.value_w)) + p[l.value_b.offset],
        })
    }

    /// Runs `prompt` through a fresh cache and returns it with the last step.
    pub fn prefill(&self, prompt: &[TokenId]) -> Result<(InferenceState, StepOutput), ModelError> {
        self.check_input(prompt)?;
        let mut state = self.start_inference();
        let mut last = None;
        for &t in prompt {
            last = Some(self.step(&mut state, t)?);
        }
        Ok((state, last.expect("non-empty prompt")))
    }
}

/// Gathers `log softmax(logits[t-1])[ids[t]]` for t = 1..T.
pub fn token_log_probs(logits: &Array2<f64>, ids: &[TokenId]) -> Vec<f64> {
    (1..ids.len())
        .map(|t| {
            let row = logits.row(t - 1);
            row[ids[t] as usize] - log_sum_exp(row)
        })
        .collect()
}

pub fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(mut row: ArrayViewMut1<'_, f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    row.mapv_inplace(|v| (v - max).exp());
    let z = row.sum();
    row.mapv_inplace(|v| v / z);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * r));
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_row(x: ArrayView1<'_, f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * r) * &g + &b
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<'_, f64>,
    grads: &mut [f64],
    g_slot: Slot,
    b_slot: Slot,
) -> Array2<f64> {
    vec_mut(grads, g_slot).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    vec_mut(grads, b_slot).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = dy * &gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &a, &x| *o = r * (a - mean_dh - x * mean_dhx));
    }
    dx
}

fn causal_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::zeros((t, d));
    let mut atts = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let mut att = qh.dot(&kh.t()) * scale;
        for i in 0..t {
            let mut row = att.row_mut(i);
            softmax_in_place(row.slice_mut(s![..=i]));
            row.slice_mut(s![i + 1..]).fill(0.0);
        }
        out.slice_mut(s![.., cols]).assign(&att.dot(&vh));
        atts.push(att);
    }
    (out, atts)
}

fn causal_attention_backward(d_o: &Array2<f64>, c: &BlockCache, heads: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = d_o.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, att) in c.att.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let doh = d_o.slice(s![.., cols.clone()]);
        dv.slice_mut(s![.., cols.clone()]).assign(&att.t().dot(&doh));
        let datt = doh.dot(&c.v.slice(s![.., cols.clone()]).t());
        // masked entries have att == 0, so they drop out of both terms
        let rowdot = (att * &datt).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = att * &(&datt - &rowdot) * scale;
        dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&c.k.slice(s![.., cols.clone()])));
        dk.slice_mut(s![.., cols.clone()]).assign(&ds.t().dot(&c.q.slice(s![.., cols])));
    }
    (dq, dk, dv)
}
