//! Run configuration: one TOML file with a section per pipeline stage.
//! Unknown keys are rejected and relative paths resolve against the
//! directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::ToyCorpusSpec;
use crate::metrics::RboConfig;
use crate::ppo::PpoConfig;
use crate::retrieval::Bm25Params;
use crate::seqmodel::{ModelConfig, SftConfig};
use crate::simulator::{ExperimentConfig, GeneratorKind, GeneratorSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("missing input {what}: {path}")]
    Missing { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    /// Generated in memory from `[corpus.toy]`.
    Toy,
    /// Read from `paths.data_dir`.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub kind: CorpusKind,
    pub toy: ToyCorpusSpec,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { kind: CorpusKind::Toy, toy: ToyCorpusSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Corpus files: written by `gen-corpus`, read for `kind = "files"`.
    pub data_dir: PathBuf,
    pub index: PathBuf,
    pub sft_checkpoint: PathBuf,
    /// One-to-one reformulation model behind the beam and pool baselines.
    pub one_to_one_checkpoint: PathBuf,
    pub ppo_checkpoint: PathBuf,
    /// Root under which each run gets a timestamped directory.
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            index: "data/bm25.json".into(),
            sft_checkpoint: "checkpoints/sft.ckpt".into(),
            one_to_one_checkpoint: "checkpoints/one_to_one.ckpt".into(),
            ppo_checkpoint: "checkpoints/ppo.ckpt".into(),
            out_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub addr: String,
    pub generator: GeneratorSpec,
    /// Ranking entries returned to the client.
    pub display_depth: usize,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into(), generator: GeneratorSpec::new(GeneratorKind::Circle, 2), display_depth: 10 }
    }
}

fn toy_model() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 64, n_heads: 4, d_ff: 256, max_len: 64 }
}

fn toy_sft() -> SftConfig {
    SftConfig { lr: 3e-3, batch: 16, epochs: 30, ..SftConfig::default() }
}

fn toy_one_to_one() -> SftConfig {
    SftConfig { lr: 3e-3, batch: 16, epochs: 15, ..SftConfig::default() }
}

fn toy_ppo() -> PpoConfig {
    PpoConfig { lr: 1e-4, batch: 32, max_steps: 20, ..PpoConfig::default() }
}

fn toy_experiment() -> ExperimentConfig {
    ExperimentConfig {
        generators: vec![
            GeneratorSpec::new(GeneratorKind::Circle, 2),
            GeneratorSpec::new(GeneratorKind::Supervised, 2),
            GeneratorSpec::new(GeneratorKind::Beam, 2),
        ],
        ..ExperimentConfig::default()
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub paths: PathsSection,
    pub bm25: Bm25Params,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub one_to_one: SftConfig,
    pub ppo: PpoConfig,
    pub rbo: RboConfig,
    pub experiment: ExperimentConfig,
    pub serve: ServeSection,
}

/// The desk-scale recipe: stage defaults sized for the toy corpus on a CPU.
impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSection::default(),
            paths: PathsSection::default(),
            bm25: Bm25Params::default(),
            model: toy_model(),
            sft: toy_sft(),
            one_to_one: toy_one_to_one(),
            ppo: toy_ppo(),
            rbo: RboConfig::default(),
            experiment: toy_experiment(),
            serve: ServeSection::default(),
        }
    }
}

impl RunConfig {
    /// Keys missing from `text` keep their value in [`RunConfig::default`],
    /// at any nesting depth; arrays are replaced whole.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Self::parse(text, Path::new("<string>"))
    }

    fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let err = |e: &dyn std::fmt::Display| ConfigError::Parse { path: path.to_owned(), reason: e.to_string() };
        let user: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("config serialises");
        merge(&mut merged, user);
        merged.try_into().map_err(|e| err(&e))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Parses, resolves paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        for path in [&mut p.data_dir, &mut p.index, &mut p.sft_checkpoint, &mut p.one_to_one_checkpoint, &mut p.ppo_checkpoint, &mut p.out_dir] {
            fix(path);
        }
        for g in self.experiment.generators.iter_mut().chain(std::iter::once(&mut self.serve.generator)) {
            for path in [&mut g.checkpoint, &mut g.fixtures, &mut g.external.fixtures, &mut g.external.cache_dir].into_iter().flatten() {
                fix(path);
            }
        }
    }

    /// Checks every section together; nothing runs on an invalid config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.corpus.toy.validate().map_err(|e| inv(&e))?;
        self.model.validate().map_err(|e| inv(&e))?;
        for (name, s) in [("sft", &self.sft), ("one_to_one", &self.one_to_one)] {
            if s.batch == 0 || !(s.lr >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name}: batch must be >= 1 and lr >= 0")));
            }
        }
        self.ppo.validate().map_err(|e| inv(&e))?;
        self.rbo.validate().map_err(|e| inv(&e))?;
        self.experiment.validate().map_err(|e| inv(&e))?;
        if !(self.bm25.k1 >= 0.0 && (0.0..=1.0).contains(&self.bm25.b)) {
            return Err(ConfigError::Invalid("bm25: k1 must be >= 0 and b in [0, 1]".into()));
        }
        if self.serve.display_depth == 0 {
            return Err(ConfigError::Invalid("serve.display_depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml_str("[ppo]\nbeta = 0.1\nbetta = 0.2\n").is_err());
        let c = RunConfig::from_toml_str("[ppo]\nbeta = 0.5\n").unwrap();
        assert_eq!(c.ppo.lr, RunConfig::default().ppo.lr);
        assert_eq!(c.ppo.beta, 0.5);
        assert_eq!(c.ppo.clip_epsilon, 0.1);
    }

    #[test]
    fn invalid_values_rejected() {
        let c = RunConfig::from_toml_str("[ppo]\nclip_epsilon = 1.5\n").unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
        let c = RunConfig::from_toml_str("[experiment]\nepsilons = [0.0, 2.0]\n").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "[paths]\nsft_checkpoint = \"ck/sft.ckpt\"\nindex = \"/abs/idx.json\"\n").unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.paths.sft_checkpoint, dir.path().join("ck/sft.ckpt"));
        assert_eq!(c.paths.index, PathBuf::from("/abs/idx.json"));
    }
}
