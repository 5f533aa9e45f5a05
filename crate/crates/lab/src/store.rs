//! Atomic artifact writes and per-directory manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| LabError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| LabError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| LabError::io(path, e))?;
    tmp.persist(path).map_err(|e| LabError::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path, producer: &'static str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(LabError::MissingInput {
            path: path.to_path_buf(),
            producer,
        }),
        Err(e) => Err(LabError::io(path, e)),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Config hash, seed and the hash of every artifact under one directory,
/// keyed by path relative to that directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub artifacts: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST);
        match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b)
                .map(Some)
                .map_err(|e| LabError::Manifest(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LabError::io(path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST), &bytes)
    }

    /// Checks the config hash and that every recorded artifact still has the
    /// recorded contents.
    pub fn verify(&self, dir: &Path, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(LabError::Manifest(format!(
                "{} was produced with config {} but the current config is {}",
                dir.display(),
                short(&self.config_hash),
                short(config_hash)
            )));
        }
        for (rel, want) in &self.artifacts {
            let path = dir.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
            if &sha256_hex(&bytes) != want {
                return Err(LabError::Manifest(format!(
                    "{} does not match its manifest hash",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Directory that owns a manifest, with helpers that write an artifact and
/// record its hash in one go.
#[derive(Debug, Clone)]
pub struct Store {
    pub dir: PathBuf,
    config_hash: String,
    seed: Option<u64>,
}

impl Store {
    pub fn new(dir: PathBuf, config_hash: String, seed: Option<u64>) -> Self {
        Self { dir, config_hash, seed }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Writes `bytes` to `rel` and records its hash. A manifest from a
    /// different config is discarded, since its artifacts are being
    /// regenerated.
    pub fn put(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        write_atomic(&path, bytes)?;
        let mut m = match Manifest::load(&self.dir)? {
            Some(m) if m.config_hash == self.config_hash => m,
            _ => Manifest {
                config_hash: self.config_hash.clone(),
                seed: self.seed,
                artifacts: BTreeMap::new(),
            },
        };
        m.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        m.save(&self.dir)?;
        Ok(path)
    }

    /// Reads an artifact this directory's manifest records for the current
    /// config, refusing files left over from another config or edited since.
    pub fn get(&self, rel: &str, producer: &'static str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        let bytes = read(&path, producer)?;
        let recorded = Manifest::load(&self.dir)?
            .filter(|m| m.config_hash == self.config_hash)
            .and_then(|m| m.artifacts.get(rel).cloned());
        match recorded {
            Some(h) if h == sha256_hex(&bytes) => Ok(bytes),
            Some(_) => Err(LabError::Manifest(format!(
                "{} does not match its manifest hash",
                path.display()
            ))),
            None => Err(LabError::Manifest(format!(
                "{} was not produced under the current config: rerun `{producer}`",
                path.display()
            ))),
        }
    }

    pub fn verify(&self) -> Result<()> {
        match Manifest::load(&self.dir)? {
            Some(m) => m.verify(&self.dir, &self.config_hash),
            None => Err(LabError::Manifest(format!("{} has no manifest", self.dir.display()))),
        }
    }
}
