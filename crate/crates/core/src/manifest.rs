//! Reproducibility manifest: one `manifest.json` per output directory with
//! config hash, seeds, stage timings and SHA-256 digests of every artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_json, write_json};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    /// Relative path (with `/` separators) → hex SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(MANIFEST_FILE) {
            out.push(path);
        }
    }
    Ok(())
}

/// Digests of every file under `root` except the manifest itself.
pub fn digest_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(root).expect("inside root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            Ok((key, file_digest(p)?))
        })
        .collect()
}

impl RunManifest {
    pub fn load_or_new(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            })
        }
    }

    /// Replaces any earlier timing for `stage`.
    pub fn record_stage(&mut self, stage: &str, seconds: f64) {
        self.stages.retain(|s| s.stage != stage);
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            seconds,
        });
    }

    /// Re-digests the tree and writes the manifest.
    pub fn finalize(&mut self, root: &Path) -> Result<()> {
        self.tool_version = env!("CARGO_PKG_VERSION").to_string();
        self.files = digest_tree(root)?;
        write_json(&root.join(MANIFEST_FILE), self)
    }

    /// Paths whose current digest differs from the recorded one (missing or
    /// unrecorded files included).
    pub fn verify(&self, root: &Path) -> Result<Vec<String>> {
        let now = digest_tree(root)?;
        let mut bad: Vec<String> = self
            .files
            .iter()
            .filter(|(k, v)| now.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        bad.extend(now.keys().filter(|k| !self.files.contains_key(*k)).cloned());
        bad.sort();
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn digests_verify_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.txt"), "x").unwrap();
        fs::write(dir.path().join("y.txt"), "y").unwrap();
        let mut m = RunManifest::load_or_new(dir.path()).unwrap();
        m.record_stage("gen", 0.5);
        m.record_stage("gen", 0.7);
        m.finalize(dir.path()).unwrap();
        assert_eq!(m.stages.len(), 1);
        assert_eq!(m.files.keys().collect::<Vec<_>>(), vec!["a/x.txt", "y.txt"]);
        let reread = RunManifest::load_or_new(dir.path()).unwrap();
        assert!(reread.verify(dir.path()).unwrap().is_empty());
        fs::write(dir.path().join("y.txt"), "z").unwrap();
        assert_eq!(reread.verify(dir.path()).unwrap(), vec!["y.txt"]);
    }
}
