//! `manifest.json`: content hashes and provenance of every produced file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Hex SHA-256 of the file bytes.
    pub sha256: String,
    pub command: String,
    pub config_hash: String,
    /// Input path to the hash it had when this artifact was produced.
    pub inputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Manifest key: the path relative to the workspace root when it lies inside
/// it, otherwise the canonical absolute path.
pub fn artifact_key(root: &Path, path: &Path) -> CliResult<String> {
    let abs = fs::canonicalize(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let root = fs::canonicalize(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let rel = abs.strip_prefix(&root).map(Path::to_path_buf).unwrap_or(abs);
    Ok(rel.to_string_lossy().into_owned())
}

impl Manifest {
    pub fn path(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    /// An empty manifest when the file does not exist yet.
    pub fn load(root: &Path) -> CliResult<Self> {
        let path = Self::path(root);
        if !path.exists() {
            return Ok(Self::default());
        }
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> CliResult<()> {
        fs::create_dir_all(root)?;
        fs::write(Self::path(root), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Hashes every input; an input the manifest knows about must still have
    /// its recorded hash.
    pub fn check_inputs(&self, root: &Path, inputs: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for p in inputs {
            let key = artifact_key(root, p)?;
            let hash = file_sha256(p)?;
            if let Some(entry) = self.artifacts.get(&key) {
                if entry.sha256 != hash {
                    return Err(CliError::Stale(format!(
                        "{} changed since it was produced by `{}`",
                        p.display(),
                        entry.command
                    )));
                }
            }
            out.insert(key, hash);
        }
        Ok(out)
    }

    pub fn record(
        &mut self,
        root: &Path,
        path: &Path,
        command: &str,
        config_hash: &str,
        inputs: &BTreeMap<String, String>,
    ) -> CliResult<()> {
        let created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.artifacts.insert(
            artifact_key(root, path)?,
            ArtifactEntry {
                sha256: file_sha256(path)?,
                command: command.to_string(),
                config_hash: config_hash.to_string(),
                inputs: inputs.clone(),
                created_unix,
            },
        );
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stale_inputs_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let a = root.join("a.txt");
        fs::write(&a, b"one").unwrap();
        let mut m = Manifest::default();
        m.record(root, &a, "gen", "cfg", &BTreeMap::new()).unwrap();
        assert_eq!(m.artifacts["a.txt"].sha256, file_sha256(&a).unwrap());
        m.save(root).unwrap();
        let m = Manifest::load(root).unwrap();
        assert!(m.check_inputs(root, &[a.clone()]).is_ok());
        fs::write(&a, b"two").unwrap();
        assert!(matches!(m.check_inputs(root, &[a.clone()]), Err(CliError::Stale(_))));
        assert!(matches!(m.check_inputs(root, &[root.join("missing")]), Err(CliError::Io(_))));
    }

    #[test]
    fn unknown_inputs_pass_with_their_hash() {
        let dir = tempfile::tempdir().unwrap();
        let b = dir.path().join("b.txt");
        fs::write(&b, b"abc").unwrap();
        let got = Manifest::default().check_inputs(dir.path(), &[b]).unwrap();
        assert_eq!(
            got["b.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
