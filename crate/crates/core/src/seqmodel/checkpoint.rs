//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CIRCKPT\0"
//! version    u32
//! mlen       u64      byte length of the manifest
//! manifest   mlen bytes of UTF-8 JSON (see `Manifest`)
//! payload    f64 LE values; array i occupies [offset, offset + len) in f64 units
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelError, PolicyModel};
use super::vocab::{VocabError, Vocabulary};

pub const MAGIC: &[u8; 8] = b"CIRCKPT\0";
pub const VERSION: u32 = 1;
const FORMAT: &str = "circle-checkpoint";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("vocabulary hash mismatch: checkpoint {found}, expected {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Sft,
    Ppo,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Sft => "sft",
            Stage::Ppo => "ppo",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub vocab: Vocabulary,
    pub arrays: Vec<ArrayEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PolicyModel,
    pub vocab: Vocabulary,
    pub stage: Stage,
    pub meta: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_owned(), source }
}

pub fn encode(model: &PolicyModel, vocab: &Vocabulary, stage: Stage, meta: serde_json::Value) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in model.named_arrays() {
        arrays.push(ArrayEntry { name: name.to_owned(), shape: shape.to_vec(), offset, len: data.len() });
        offset += data.len();
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        stage,
        config: *model.config(),
        vocab_size: model.vocab_size(),
        vocab_hash: vocab.hash(),
        vocab: vocab.clone(),
        arrays,
        meta,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serialises");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in model.named_arrays() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], expected_vocab: Option<&Vocabulary>) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20usize.saturating_add(mlen))
        .ok_or_else(|| CheckpointError::Corrupt("manifest truncated".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CheckpointError::Corrupt("manifest format/version".into()));
    }
    let found = manifest.vocab.hash();
    if found != manifest.vocab_hash {
        return Err(CheckpointError::Corrupt("stored vocabulary does not match its hash".into()));
    }
    if let Some(v) = expected_vocab {
        if v.hash() != manifest.vocab_hash {
            return Err(CheckpointError::VocabMismatch { expected: v.hash(), found });
        }
    }
    let payload = &bytes[20 + mlen..];
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for a in &manifest.arrays {
        let start = a.offset.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("offset".into()))?;
        let raw = payload
            .get(start..start + 8 * a.len)
            .ok_or_else(|| CheckpointError::Corrupt(format!("array {} truncated", a.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((a.name.clone(), a.shape.clone(), data));
    }
    let model = PolicyModel::from_named_arrays(manifest.config, manifest.vocab_size, &arrays)?;
    Ok(Checkpoint { model, vocab: manifest.vocab, stage: manifest.stage, meta: manifest.meta })
}

/// Writes via a temporary sibling and rename so readers never see a torn file.
pub fn save(
    path: &Path,
    model: &PolicyModel,
    vocab: &Vocabulary,
    stage: Stage,
    meta: serde_json::Value,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&encode(model, vocab, stage, meta)).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load(path: &Path, expected_vocab: Option<&Vocabulary>) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, expected_vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (PolicyModel, Vocabulary) {
        let vocab = Vocabulary::from_texts(["alpha beta gamma"]);
        let cfg = ModelConfig { n_layers: 1, d_model: 8, n_heads: 2, d_ff: 16, max_len: 8 };
        (PolicyModel::new(cfg, vocab.len(), 4).unwrap(), vocab)
    }

    #[test]
    fn round_trip() {
        let (m, v) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, &v, Stage::Sft, serde_json::json!({"step": 3})).unwrap();
        let ck = load(&p, Some(&v)).unwrap();
        assert_eq!(ck.model.params(), m.params());
        assert_eq!(ck.stage, Stage::Sft);
        assert_eq!(ck.meta["step"], 3);
        assert!(!p.with_extension("tmp").exists());
    }

    #[test]
    fn payload_is_little_endian_f64() {
        let (m, v) = setup();
        let bytes = encode(&m, &v, Stage::Base, serde_json::Value::Null);
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let first = f64::from_le_bytes(bytes[20 + mlen..28 + mlen].try_into().unwrap());
        assert_eq!(first, m.params()[0]);
        assert_eq!(bytes.len(), 20 + mlen + 8 * m.num_params());
    }

    #[test]
    fn rejects_mismatched_vocab_and_garbage() {
        let (m, v) = setup();
        let bytes = encode(&m, &v, Stage::Base, serde_json::Value::Null);
        let other = Vocabulary::from_texts(["alpha beta delta"]);
        assert!(matches!(decode(&bytes, Some(&other)), Err(CheckpointError::VocabMismatch { .. })));
        assert!(matches!(decode(b"nope", None), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode(&bad, None), Err(CheckpointError::Version(9))));
        assert!(decode(&bytes[..bytes.len() - 8], None).is_err());
    }
}
