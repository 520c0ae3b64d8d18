//! Append-only experiment manifest: every artifact the tools produce is
//! recorded with a content hash, alongside the config snapshot that
//! produced it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub timestamp_unix: u64,
    pub tool_version: String,
    pub root_seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub entries: Vec<ManifestEntry>,
}

pub fn file_sha256(path: &Path) -> std::io::Result<(String, u64)> {
    let data = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&data);
    Ok((hex::encode(h.finalize()), data.len() as u64))
}

impl ExperimentManifest {
    pub fn load_or_default(dir: &Path) -> Self {
        let p = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&p) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => ExperimentManifest::default(),
        }
    }

    /// Append one entry describing freshly written artifacts. Existing
    /// entries are never modified.
    pub fn append(
        &mut self,
        dir: &Path,
        command: &str,
        root_seed: u64,
        config: serde_json::Value,
        artifact_paths: &[PathBuf],
    ) -> std::io::Result<()> {
        let mut artifacts = Vec::new();
        for p in artifact_paths {
            let (sha256, bytes) = file_sha256(p)?;
            artifacts.push(ArtifactRecord {
                path: p
                    .strip_prefix(dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned(),
                sha256,
                bytes,
            });
        }
        self.entries.push(ManifestEntry {
            command: command.to_string(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            root_seed,
            config,
            artifacts,
        });
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text)
    }

    /// Latest record for a relative path, if any.
    pub fn find(&self, rel: &str) -> Option<&ArtifactRecord> {
        self.entries
            .iter()
            .rev()
            .flat_map(|e| e.artifacts.iter())
            .find(|a| a.path == rel)
    }
}
