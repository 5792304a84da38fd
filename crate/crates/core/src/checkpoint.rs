//! Checkpoint directories: `manifest.json` (config, epoch, seed, tensor index)
//! and `params.bin` (little-endian f32, tensors concatenated in index order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

fn collect(model: &Model<f32>) -> (Vec<TensorEntry>, Vec<f32>) {
    let mut entries = Vec::new();
    let mut flat = Vec::new();
    model.visit(&mut |name, _, p| {
        entries.push(TensorEntry { name: name.to_string(), shape: p.shape.clone(), offset: flat.len(), len: p.value.len() });
        flat.extend_from_slice(&p.value);
    });
    let mut m = model.clone();
    m.visit_buffers_mut(&mut |name, b| {
        entries.push(TensorEntry { name: name.to_string(), shape: vec![b.len()], offset: flat.len(), len: b.len() });
        flat.extend_from_slice(b);
    });
    (entries, flat)
}

pub fn save_checkpoint(model: &Model<f32>, dir: &Path, epoch: usize, seed: u64) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (tensors, flat) = collect(model);
    let bytes: Vec<u8> = flat.iter().flat_map(|v| v.to_le_bytes()).collect();
    let params = dir.join(PARAMS_FILE);
    fs::write(&params, bytes).map_err(io_err(&params))?;
    let manifest =
        CheckpointManifest { format_version: CHECKPOINT_FORMAT_VERSION, config: model.config.clone(), epoch, seed, tensors };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Corrupt(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok(manifest)
}

/// Load a checkpoint; the architecture comes from its manifest.
pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, CheckpointManifest), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::<f32>::build(&manifest.config, 0)?;
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() % 4 != 0 {
        return Err(CheckpointError::Corrupt("parameter file is not a whole number of f32 values".into()));
    }
    let flat: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let (expected, _) = collect(&model);
    if expected.len() != manifest.tensors.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, manifest lists {}",
            expected.len(),
            manifest.tensors.len()
        )));
    }
    for (want, got) in expected.iter().zip(&manifest.tensors) {
        if want.name != got.name || want.len != got.len || got.offset + got.len > flat.len() {
            return Err(CheckpointError::Corrupt(format!("tensor {} does not match the architecture", got.name)));
        }
    }
    let mut k = 0;
    let entries = &manifest.tensors;
    model.visit_mut(&mut |_, _, p| {
        let e = &entries[k];
        p.value.copy_from_slice(&flat[e.offset..e.offset + e.len]);
        k += 1;
    });
    model.visit_buffers_mut(&mut |_, b| {
        let e = &entries[k];
        b.copy_from_slice(&flat[e.offset..e.offset + e.len]);
        k += 1;
    });
    Ok((model, manifest))
}

/// Load and require the stored architecture to equal `expected`.
pub fn load_checkpoint_for(dir: &Path, expected: &ModelConfig) -> Result<(Model<f32>, CheckpointManifest), CheckpointError> {
    let manifest = read_manifest(dir)?;
    if manifest.config.num_encoders != expected.num_encoders {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} encoders, config asks for {}",
            manifest.config.num_encoders, expected.num_encoders
        )));
    }
    if &manifest.config != expected {
        return Err(CheckpointError::Mismatch("checkpoint architecture differs from the configured one".into()));
    }
    load_checkpoint(dir)
}
