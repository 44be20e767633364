//! Run directories and their manifests. Each run gets a fresh timestamped
//! directory; the manifest is written last, atomically, so its presence
//! means every artifact it lists is complete.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("artifact listed in manifest does not exist: {0}")]
    Missing(PathBuf),
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedFile {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub seed: u64,
    /// Full configuration snapshot as TOML.
    pub config: String,
    pub checkpoints: Vec<HashedFile>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<HashedFile>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64), RunError> {
    let mut f = fs::File::open(path).map_err(io(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n_total = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        n_total += n as u64;
    }
    Ok((hex::encode(h.finalize()), n_total))
}

#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    started_at: DateTime<Utc>,
}

impl RunDir {
    /// Creates `root/<UTC timestamp>`, suffixing `-1`, `-2`, ... if taken.
    pub fn create(root: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(root).map_err(io(root))?;
        let started_at = Utc::now();
        let stamp = started_at.format("%Y%m%dT%H%M%S%.3fZ").to_string();
        for n in 0.. {
            let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path, started_at }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(RunError::Io { path, source: e }),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Hashes every artifact and checkpoint and writes the manifest.
    pub fn finish(
        self,
        command: &str,
        seed: u64,
        config_toml: &str,
        checkpoints: &[PathBuf],
        artifacts: &[PathBuf],
    ) -> Result<Manifest, RunError> {
        let hash = |p: &Path, shown: PathBuf| -> Result<HashedFile, RunError> {
            if !p.exists() {
                return Err(RunError::Missing(p.to_owned()));
            }
            let (sha256, bytes) = sha256_file(p)?;
            Ok(HashedFile { path: shown, sha256, bytes })
        };
        let artifacts = artifacts
            .iter()
            .map(|a| {
                let full = if a.is_relative() { self.path.join(a) } else { a.clone() };
                let shown = full.strip_prefix(&self.path).map(Path::to_path_buf).unwrap_or_else(|_| full.clone());
                hash(&full, shown)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let checkpoints = checkpoints.iter().map(|c| hash(c, c.clone())).collect::<Result<Vec<_>, _>>()?;
        let manifest = Manifest {
            format: "circle-run".into(),
            version: 1,
            command: command.to_owned(),
            seed,
            config: config_toml.to_owned(),
            checkpoints,
            artifacts,
            started_at: self.started_at,
            finished_at: Utc::now(),
        };
        let path = self.path.join(MANIFEST_FILE);
        let tmp = self.path.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&manifest).expect("manifest serialises")).map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))?;
        Ok(manifest)
    }
}

/// Loads a manifest and checks that every artifact it lists is present with
/// the recorded hash.
pub fn load_manifest(run_dir: &Path) -> Result<Manifest, RunError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| RunError::Manifest { path: path.clone(), reason: e.to_string() })?;
    for a in &m.artifacts {
        let full = run_dir.join(&a.path);
        if !full.exists() {
            return Err(RunError::Missing(full));
        }
        if sha256_file(&full)?.0 != a.sha256 {
            return Err(RunError::Manifest { path: path.clone(), reason: format!("hash mismatch for {}", a.path.display()) });
        }
    }
    Ok(m)
}
