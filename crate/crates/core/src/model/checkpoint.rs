//! Checkpoint directory: `manifest.toml`, `weights.bin` (little-endian
//! scalars in layout order) and optionally `optimizer.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use super::real::Real;
use super::{Model, ModelConfig, ModelError, TensorSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("{file} does not match the hash recorded in the manifest")]
    Hash { file: &'static str },
    #[error("checkpoint vocabulary {found} differs from expected {expected}")]
    Vocabulary { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: u64,
    pub seed: u64,
    pub vocab_hash: String,
    pub weights_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamWConfig>,
    pub config: ModelConfig,
    #[serde(rename = "tensor")]
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub manifest: Manifest,
    pub model: Model<T>,
    pub optimizer: Option<AdamW>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint<T: Real>(
    dir: &Path,
    model: &Model<T>,
    optimizer: Option<&AdamW>,
    step: u64,
    seed: u64,
    vocab_hash: &str,
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::with_capacity(model.params().len() * T::BYTES);
    for &p in model.params() {
        p.write_le(&mut weights);
    }
    let opt_bytes = optimizer.map(AdamW::to_bytes);
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        dtype: T::DTYPE.to_string(),
        step,
        seed,
        vocab_hash: vocab_hash.to_string(),
        weights_sha256: sha256_hex(&weights),
        optimizer_sha256: opt_bytes.as_deref().map(sha256_hex),
        optimizer: optimizer.map(|o| o.config),
        config: model.config().clone(),
        tensors: model.layout().tensors().to_vec(),
    };
    fs::write(dir.join("weights.bin"), &weights)?;
    match &opt_bytes {
        Some(b) => fs::write(dir.join("optimizer.bin"), b)?,
        None => {
            let _ = fs::remove_file(dir.join("optimizer.bin"));
        }
    }
    let text = toml::to_string(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.format_version,
        });
    }
    Ok(manifest)
}

/// Loads and verifies a checkpoint. Weights stored in another precision
/// are converted to `T`. When `expected_vocab` is given the recorded
/// vocabulary hash must match it.
pub fn load_checkpoint<T: Real>(dir: &Path, expected_vocab: Option<&str>) -> Result<Checkpoint<T>, CheckpointError> {
    let manifest = read_manifest(dir)?;
    if let Some(v) = expected_vocab {
        if v != manifest.vocab_hash {
            return Err(CheckpointError::Vocabulary {
                expected: v.to_string(),
                found: manifest.vocab_hash.clone(),
            });
        }
    }
    let weights = fs::read(dir.join("weights.bin"))?;
    if sha256_hex(&weights) != manifest.weights_sha256 {
        return Err(CheckpointError::Hash { file: "weights.bin" });
    }
    let params: Vec<T> = match manifest.dtype.as_str() {
        "f32" => decode::<f32, T>(&weights),
        "f64" => decode::<f64, T>(&weights),
        other => return Err(CheckpointError::Manifest(format!("unknown dtype `{other}`"))),
    };
    let model = Model::from_parts(manifest.config.clone(), params)?;
    if model.layout().tensors() != manifest.tensors.as_slice() {
        return Err(CheckpointError::Manifest("tensor table disagrees with config".into()));
    }
    let optimizer = match &manifest.optimizer_sha256 {
        None => None,
        Some(h) => {
            let bytes = fs::read(dir.join("optimizer.bin"))?;
            if &sha256_hex(&bytes) != h {
                return Err(CheckpointError::Hash { file: "optimizer.bin" });
            }
            let mut opt = AdamW::new(manifest.optimizer.unwrap_or_default(), model.layout());
            opt.restore(&bytes).map_err(CheckpointError::Manifest)?;
            Some(opt)
        }
    };
    Ok(Checkpoint {
        manifest,
        model,
        optimizer,
    })
}

fn decode<S: Real, T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::from_f64(S::read_le(c).to_f64()))
        .collect()
}
