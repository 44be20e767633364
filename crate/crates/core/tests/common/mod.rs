//! Small, fast setup shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::OnceLock;

use circle_core::config::RunConfig;
use circle_core::corpus::ToyCorpusSpec;
use circle_core::pipeline::TrainedPipeline;
use circle_core::retrieval::Ranking;
use circle_core::seqmodel::ModelConfig;

pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.toy = ToyCorpusSpec {
        n_topics: 6,
        facets_per_topic: 2,
        docs_per_facet: 3,
        vocab_size: 120,
        seed: 3,
        refinements_per_facet: 2,
        records_per_topic: 3,
        generic_docs_per_topic: 2,
        held_out_topics: 1,
        grouped_prob: 0.65,
    };
    cfg.model = ModelConfig { n_layers: 1, d_model: 32, n_heads: 2, d_ff: 64, max_len: 48 };
    cfg.sft.epochs = 60;
    cfg.sft.batch = 8;
    cfg.one_to_one.epochs = 40;
    cfg.one_to_one.batch = 8;
    cfg.ppo.batch = 8;
    cfg.ppo.max_steps = 4;
    cfg
}

/// SFT and one-to-one models on the small corpus, trained once per binary.
pub fn small_pipeline() -> &'static TrainedPipeline {
    static P: OnceLock<TrainedPipeline> = OnceLock::new();
    P.get_or_init(|| TrainedPipeline::train(&small_config(), false, true).expect("small pipeline trains"))
}

/// Direct evaluation of truncated RBO: prefix sets intersected at every depth.
pub fn brute_rbo(a: &[&str], b: &[&str], p: f64, eval_depth: usize) -> f64 {
    let depth = a.len().min(b.len()).min(eval_depth);
    let mut sum = 0.0;
    for d in 1..=depth {
        let sa: BTreeSet<&str> = a[..d].iter().copied().collect();
        let sb: BTreeSet<&str> = b[..d].iter().copied().collect();
        sum += p.powi(d as i32 - 1) * sa.intersection(&sb).count() as f64 / d as f64;
    }
    (1.0 - p) * sum
}

pub fn ids(r: &Ranking) -> Vec<&str> {
    r.ids().collect()
}

/// Finite-difference harness shared by the gradient checks.
pub mod gradcheck {
    use circle_core::seqmodel::train::cross_entropy;
    use circle_core::seqmodel::{ModelConfig, PolicyModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const H: f64 = 1e-5;
    pub const REL_TOL: f64 = 1e-3;
    pub const PASS_FRACTION: f64 = 0.99;

    pub fn model() -> PolicyModel {
        let cfg = ModelConfig { n_layers: 2, d_model: 16, n_heads: 2, d_ff: 32, max_len: 16 };
        let mut m = PolicyModel::new(cfg, 11, 21).unwrap();
        // break the zero/one init symmetry so every parameter has a visible gradient
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in m.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
        m
    }

    pub fn ce_loss(m: &PolicyModel, ids: &[u32]) -> f64 {
        let pass = m.forward(ids).unwrap();
        cross_entropy(&pass.logits, ids).0
    }

    /// Fraction of sampled coordinates whose relative error is within tolerance;
    /// coordinates where both gradients are tiny count as passing.
    pub fn check(m: &mut PolicyModel, analytic: &[f64], loss: &dyn Fn(&PolicyModel) -> f64, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ok = 0;
        for _ in 0..n {
            let i = rng.random_range(0..m.num_params());
            let orig = m.params()[i];
            m.params_mut()[i] = orig + H;
            let lp = loss(m);
            m.params_mut()[i] = orig - H;
            let lm = loss(m);
            m.params_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * H);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs());
            if denom < 1e-7 || (a - numeric).abs() / denom <= REL_TOL {
                ok += 1;
            }
        }
        ok as f64 / n as f64
    }

    /// Pass fraction of the cross-entropy gradient.
    pub fn ce_pass_fraction() -> f64 {
        let mut m = model();
        let ids = [1u32, 5, 2, 6, 7, 2, 8, 9, 3];
        let mut g = m.zero_grads();
        let pass = m.forward(&ids).unwrap();
        let (_, _, d) = cross_entropy(&pass.logits, &ids);
        m.backward(&pass, d.view(), None, &mut g);
        check(&mut m, &g.as_slice().to_vec(), &|m| ce_loss(m, &ids), 600)
    }

    /// Pass fraction of the clipped surrogate gradient, with the number of
    /// clipped and total tokens.
    pub fn ppo_pass_fraction() -> (f64, usize, usize) {
        use circle_core::ppo::{surrogate, SurrogateSample};
        let mut m = model();
        let ids = [1u32, 5, 2, 6, 7, 2, 8, 9, 2, 3];
        let prompt_len = 3;
        let cur = m.log_probs(&ids).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // old log-probs off by up to 0.3 so some tokens sit on the clipped branch
        let old: Vec<f64> = cur[prompt_len - 1..].iter().map(|lp| lp + rng.random_range(-0.3..0.3)).collect();
        let adv: Vec<f64> = (0..old.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let sample = SurrogateSample {
            tokens: &ids,
            prompt_len,
            old_log_probs: &old,
            advantages: &adv,
            // value head is detached, so its loss is checked on its own
            value_target: None,
        };
        let (eps, scale) = (0.1, 1.0 / old.len() as f64);
        let loss = |m: &PolicyModel| -scale * surrogate(m, &sample, eps, scale, None).unwrap().objective;
        let mut g = m.zero_grads();
        let s = surrogate(&m, &sample, eps, scale, Some(&mut g)).unwrap();
        (check(&mut m, &g.as_slice().to_vec(), &loss, 600), s.clipped, s.tokens)
    }
}
