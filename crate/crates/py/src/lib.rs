//! Python bindings: the ranking metrics and a trained toy pipeline that can
//! be asked for clarifying suggestions.

use circle_core::config::RunConfig;
use circle_core::metrics::{self, RboConfig};
use circle_core::pipeline::TrainedPipeline;
use circle_core::policy::SessionState;
use circle_core::retrieval::{Ranking, Retriever};
use circle_core::simulator::{GeneratorKind, GeneratorSpec};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rbo_config(p: f64, eval_depth: usize) -> PyResult<RboConfig> {
    let cfg = RboConfig { p, eval_depth };
    cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(cfg)
}

fn as_ranking(ids: &[String]) -> Ranking {
    let n = ids.len();
    Ranking::from_scores("", ids.iter().enumerate().map(|(i, d)| (d.clone(), (n - i) as f64)).collect(), n)
}

fn kind_from_name(name: &str) -> PyResult<GeneratorKind> {
    Ok(match name {
        "circle" => GeneratorKind::Circle,
        "supervised" => GeneratorKind::Supervised,
        "beam" => GeneratorKind::Beam,
        "pool_cluster" => GeneratorKind::PoolCluster,
        other => return Err(PyValueError::new_err(format!("unknown generator {other:?}"))),
    })
}

/// Truncated rank-biased overlap of two ranked id lists.
#[pyfunction]
#[pyo3(signature = (s, t, p = 0.9, eval_depth = 100))]
fn rbo(s: Vec<String>, t: Vec<String>, p: f64, eval_depth: usize) -> PyResult<f64> {
    Ok(metrics::rbo_ids(&s, &t, &rbo_config(p, eval_depth)?))
}

/// Negative sum of RBO over ordered pairs of rankings; 0 when fully disjoint.
#[pyfunction]
#[pyo3(signature = (rankings, p = 0.9, eval_depth = 100))]
fn dissimilarity_reward(rankings: Vec<Vec<String>>, p: f64, eval_depth: usize) -> PyResult<f64> {
    let rs: Vec<Ranking> = rankings.iter().map(|r| as_ranking(r)).collect();
    Ok(metrics::dissimilarity_reward(&rs, &rbo_config(p, eval_depth)?))
}

/// Mean reciprocal rank; `None` ranks count as 0.
#[pyfunction]
fn mrr(ranks: Vec<Option<usize>>) -> PyResult<f64> {
    metrics::mrr(&ranks).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyfunction]
fn reciprocal_rank(rank: Option<usize>) -> f64 {
    metrics::reciprocal_rank(rank)
}

/// The built-in toy recipe as TOML, a starting point for `Pipeline`.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_toml_string()
}

/// Corpus, index and models trained in process from a TOML config.
#[pyclass(frozen)]
struct Pipeline {
    inner: TrainedPipeline,
}

#[pymethods]
impl Pipeline {
    #[new]
    #[pyo3(signature = (config = None, with_ppo = true, with_one_to_one = true))]
    fn new(py: Python<'_>, config: Option<&str>, with_ppo: bool, with_one_to_one: bool) -> PyResult<Self> {
        let cfg = match config {
            Some(text) => RunConfig::from_toml_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => RunConfig::default(),
        };
        cfg.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = py
            .detach(|| TrainedPipeline::train(&cfg, with_ppo, with_one_to_one))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// (qid, starting query) for every evaluation query.
    fn dev_queries(&self) -> Vec<(String, String)> {
        self.inner.bundle.dev_queries().into_iter().map(|q| (q.qid, q.initial_query)).collect()
    }

    /// Top documents as (doc_id, score).
    #[pyo3(signature = (query, depth = 10))]
    fn search(&self, query: &str, depth: usize) -> Vec<(String, f64)> {
        self.inner.index.search(query, depth).entries.into_iter().map(|e| (e.doc_id, e.score)).collect()
    }

    /// Suggestions for a session whose first entry is the starting query and
    /// whose later entries are the suggestions chosen so far.
    #[pyo3(signature = (history, generator = "circle", k = 2, seed = 0))]
    fn suggest(&self, py: Python<'_>, history: Vec<String>, generator: &str, k: usize, seed: u64) -> PyResult<Vec<String>> {
        let Some((first, rest)) = history.split_first() else {
            return Err(PyValueError::new_err("history must hold at least the starting query"));
        };
        let spec = GeneratorSpec::new(kind_from_name(generator)?, k);
        let g = self.inner.factory().build(&spec).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let mut state = SessionState::new(first.as_str());
        for s in rest {
            state.select(s.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = py.detach(|| g.generate(&state, &mut rng)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(out.set.suggestions)
    }
}

#[pymodule]
fn circle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rbo, m)?)?;
    m.add_function(wrap_pyfunction!(dissimilarity_reward, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(reciprocal_rank, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_scores_keep_the_given_order() {
        let ids: Vec<String> = ["b", "a", "c"].map(String::from).into();
        assert_eq!(as_ranking(&ids).ids().collect::<Vec<_>>(), ["b", "a", "c"]);
    }

    #[test]
    fn generator_names_match_the_config_spelling() {
        for k in [GeneratorKind::Circle, GeneratorKind::Supervised, GeneratorKind::Beam, GeneratorKind::PoolCluster] {
            assert_eq!(kind_from_name(k.name()).unwrap(), k);
        }
    }
}
