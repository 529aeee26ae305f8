//! Per-directory run manifests recording the command, resolved config,
//! input and output file hashes, seed, tool version and wall time.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed run manifest {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{file} does not match the hash recorded in {manifest}")]
    HashMismatch { file: String, manifest: PathBuf },
    #[error("{file} is not listed in {manifest}")]
    Unlisted { file: String, manifest: PathBuf },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn sha256_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Every regular file below `dir`, as `/`-separated relative paths in
/// sorted order, excluding manifests.
pub fn list_files(dir: &Path) -> Result<Vec<String>, ManifestError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), ManifestError> {
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                let rel = path.strip_prefix(root).expect("walk stays below root");
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Consumed files (as given on the command line) and their hashes.
    pub inputs: BTreeMap<String, String>,
    /// Produced files relative to the run directory and their hashes.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub deterministic: bool,
    pub tool_version: String,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, deterministic: bool) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
            deterministic,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Hashes every file currently below `dir` and writes `dir/run.json`.
    pub fn finish(mut self, dir: &Path, wall_time_s: f64) -> Result<RunManifest, ManifestError> {
        self.wall_time_s = wall_time_s;
        self.outputs.clear();
        for rel in list_files(dir)? {
            let hash = sha256_file(&dir.join(&rel))?;
            self.outputs.insert(rel, hash);
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Result<RunManifest, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Malformed {
            path,
            reason: e.to_string(),
        })
    }

    /// Checks that `file`, inside the run directory `dir`, still has the
    /// hash this manifest recorded for it.
    pub fn verify_file(&self, dir: &Path, file: &Path) -> Result<(), ManifestError> {
        let rel = file.strip_prefix(dir).unwrap_or(file);
        let key: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let key = key.join("/");
        let manifest = dir.join(MANIFEST_FILE);
        let want = self.outputs.get(&key).ok_or_else(|| ManifestError::Unlisted {
            file: key.clone(),
            manifest: manifest.clone(),
        })?;
        if sha256_file(&dir.join(rel))? != *want {
            return Err(ManifestError::HashMismatch { file: key, manifest });
        }
        Ok(())
    }

    /// Re-hashes every recorded output.
    pub fn verify(&self, dir: &Path) -> Result<(), ManifestError> {
        for rel in self.outputs.keys() {
            self.verify_file(dir, Path::new(rel))?;
        }
        Ok(())
    }
}

/// Verifies `file` against the manifest of the directory holding it, when
/// that directory has one. Returns whether a manifest was found.
pub fn verify_upstream(file: &Path) -> Result<bool, ManifestError> {
    let file = fs::canonicalize(file).map_err(io_err(file))?;
    for d in file.ancestors().skip(1) {
        if d.join(MANIFEST_FILE).is_file() {
            RunManifest::read(d)?.verify_file(d, &file)?;
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_hashes_verify_and_detect_edits() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.txt"), "alpha").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "beta").unwrap();
        let m = RunManifest::new("test", serde_json::json!({"k": 1}), 3, true)
            .finish(dir.path(), 0.5)
            .unwrap();
        assert_eq!(m.outputs.keys().collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        assert!(verify_upstream(&dir.path().join("sub/b.txt")).unwrap());
        fs::write(dir.path().join("sub/b.txt"), "gamma").unwrap();
        assert!(matches!(back.verify(dir.path()), Err(ManifestError::HashMismatch { .. })));
        assert!(matches!(
            verify_upstream(&dir.path().join("sub/b.txt")),
            Err(ManifestError::HashMismatch { .. })
        ));
    }
}
