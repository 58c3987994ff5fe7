//! Run manifest: what was run, with which config, and content hashes of
//! every artifact written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
    pub metrics: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// An output directory that records every file written into it.
pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl OutputDir {
    /// Creates the directory and proves it writable before any work starts.
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let probe = root.join(".write-probe");
        std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
        Ok(OutputDir { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let sha256 = sha256_hex(bytes);
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact { path: rel.to_string(), sha256: sha256.clone() });
        Ok(sha256)
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    pub fn finish(&self, mut manifest: RunManifest) -> Result<RunManifest> {
        manifest.artifacts = self.artifacts.clone();
        manifest.finished_unix = unix_now();
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub fn load(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Re-hashes every listed artifact; returns one message per missing or
/// modified file.
pub fn verify(dir: &Path) -> Result<Vec<String>> {
    let manifest = load(dir)?;
    let mut problems = Vec::new();
    for a in &manifest.artifacts {
        match std::fs::read(dir.join(&a.path)) {
            Ok(bytes) if sha256_hex(&bytes) == a.sha256 => {}
            Ok(_) => problems.push(format!("{}: content hash mismatch", a.path)),
            Err(e) => problems.push(format!("{}: {e}", a.path)),
        }
    }
    Ok(problems)
}
