//! Run manifests: one per output directory, listing every artifact with its
//! SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tila_core::{Error, Result};

pub const MANIFEST_FILE: &str = "run-manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub config_sha256: String,
    pub seed: u64,
    /// Derived per-component seeds.
    pub seeds: BTreeMap<String, u64>,
    /// Command options, with input files identified by content hash.
    pub options: BTreeMap<String, String>,
    pub out_dir: String,
    /// Relative path → SHA-256 of the file contents.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    /// Everything that determines the outputs.
    pub fn identity(&self) -> String {
        let id = (&self.command, &self.config_sha256, self.seed, &self.options);
        sha256_hex(serde_json::to_string(&id).expect("identity serialises").as_bytes())
    }

    pub fn same_run(&self, other: &RunManifest) -> bool {
        self.identity() == other.identity()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::domain(format!("{}: {e}", path.display())))
    }
}

/// Relative paths of every regular file below `dir`, sorted, excluding the
/// manifest and in-flight temporaries.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays below root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != MANIFEST_FILE {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn checksum_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    list_files(dir)?
        .into_iter()
        .map(|rel| {
            let path: PathBuf = dir.join(&rel);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok((rel, sha256_hex(&bytes)))
        })
        .collect()
}

/// Checks that the manifest in `dir` covers exactly the files present and
/// that every checksum and the config hash still match.
pub fn verify_run(dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::load(dir)?;
    let actual = checksum_files(dir)?;
    if actual != manifest.artifacts {
        let listed: Vec<&String> = manifest.artifacts.keys().collect();
        let found: Vec<&String> = actual.keys().collect();
        if listed != found {
            return Err(Error::domain(format!("artifact set differs: listed {listed:?}, found {found:?}")));
        }
        let bad: Vec<&String> = actual.iter().filter(|(k, v)| manifest.artifacts[*k] != **v).map(|(k, _)| k).collect();
        return Err(Error::domain(format!("checksum mismatch for {bad:?}")));
    }
    if let Some(path) = &manifest.config_path {
        if let Ok(bytes) = fs::read(path) {
            if sha256_hex(&bytes) != manifest.config_sha256 {
                return Err(Error::domain(format!("config {path} changed since the run")));
            }
        }
    }
    Ok(manifest)
}
