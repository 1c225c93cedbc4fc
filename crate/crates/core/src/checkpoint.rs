//! Checkpoint format: one flat little-endian f32 binary per checkpoint plus
//! a JSON manifest naming every tensor with shape, byte range, and content
//! hash, and carrying model metadata (role, seed, dataset hash, metrics).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;
use crate::tensor::Tensor;

pub const TENSORS_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub byte_len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub role: String,
    pub seed: u64,
    pub dataset_hash: String,
    /// Architecture descriptor, enough to rebuild the model skeleton.
    pub arch: serde_json::Value,
    /// Evaluation metrics recorded at save time.
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    role: &str,
    seed: u64,
    dataset_hash: &str,
    arch: serde_json::Value,
    metrics: serde_json::Value,
    params: &[(&'static str, &Tensor<f32>)],
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let offset = blob.len();
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let byte_len = blob.len() - offset;
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            byte_len,
            sha256: sha256_hex(&blob[offset..offset + byte_len]),
        });
    }
    let manifest = CheckpointManifest {
        role: role.to_string(),
        seed,
        dataset_hash: dataset_hash.to_string(),
        arch,
        metrics,
        tensors: entries,
    };
    fs::write(dir.join(TENSORS_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "no manifest at {}",
            path.display()
        )));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Fill a model's parameters (in declaration order) from a checkpoint,
/// verifying names, shapes, and content hashes.
pub fn load_checkpoint_into(
    dir: &Path,
    params: Vec<(&'static str, &mut Tensor<f32>)>,
) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    let blob = fs::read(dir.join(TENSORS_FILE))?;
    load_checkpoint_from_parts(manifest, &blob, params)
}

/// Filesystem-free variant for callers that already hold the bytes.
pub fn load_checkpoint_from_parts(
    manifest: CheckpointManifest,
    blob: &[u8],
    params: Vec<(&'static str, &mut Tensor<f32>)>,
) -> Result<CheckpointManifest> {
    if manifest.tensors.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            params.len()
        )));
    }
    for (entry, (name, tensor)) in manifest.tensors.iter().zip(params) {
        if entry.name != name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: checkpoint `{}` vs model `{}`",
                entry.name, name
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` shape {:?} does not match model {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let bytes = blob
            .get(entry.offset..entry.offset + entry.byte_len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` out of range", entry.name)))?;
        if sha256_hex(bytes) != entry.sha256 {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` content hash mismatch",
                entry.name
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *tensor = Tensor::new(entry.shape.clone(), values)?;
    }
    Ok(manifest)
}

/// Hash of the manifest file bytes; the per-tensor hashes inside make this
/// cover the parameter contents as well.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(dir.join(MANIFEST_FILE))?))
}

/// Hash over a model's in-memory parameters, for frozen-weights checks.
pub fn params_hash(params: &[(&'static str, &Tensor<f32>)]) -> String {
    let mut bytes = Vec::new();
    for (name, t) in params {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}
