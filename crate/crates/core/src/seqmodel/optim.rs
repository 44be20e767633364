//! Adam over a flat parameter buffer, with optional per-range learning rates.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    groups: Vec<(Range<usize>, f64)>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64, cfg: AdamConfig) -> Self {
        Self { cfg, lr, groups: Vec::new(), m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    /// Overrides the learning rate on `range`.
    pub fn set_group_lr(&mut self, range: Range<usize>, lr: f64) {
        self.groups.push((range, lr));
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut [f64], grads: &Gradients) -> f64 {
        let g = grads.as_slice();
        assert_eq!(params.len(), g.len(), "gradient/parameter length mismatch");
        let norm = grads.norm();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut lr = vec![self.lr; params.len()];
        for (range, group_lr) in &self.groups {
            lr[range.clone()].iter_mut().for_each(|l| *l = *group_lr);
        }
        for i in 0..params.len() {
            let gi = g[i] * scale;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gi;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gi * gi;
            params[i] -= lr[i] * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
        }
        norm
    }
}
