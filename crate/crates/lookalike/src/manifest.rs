//! Per-stage run manifests: enough metadata to re-run a stage bit-identically
//! (config hash, seed, views) plus the files it read and wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub views: Vec<String>,
    pub wall_ms: u128,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

pub fn config_hash(config_bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(config_bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let path = out_dir.join(format!("{}_manifest.json", manifest.stage));
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Invalid(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrips_and_hash_is_stable() {
        let m = RunManifest {
            stage: "train".into(),
            config_sha256: config_hash(b"[train]\n"),
            seed: 9,
            views: vec!["demography".into()],
            wall_ms: 12,
            inputs: vec!["a.tsv".into()],
            outputs: vec!["b.tsv".into()],
        };
        assert_eq!(m.config_sha256, config_hash(b"[train]\n"));
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &m).unwrap();
        assert!(path.ends_with("train_manifest.json"));
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
