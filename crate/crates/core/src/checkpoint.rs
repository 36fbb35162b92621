//! Checkpoint format: a JSON manifest plus a blob of little-endian `f32`
//! parameter arrays indexed by name.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::Tensor;
use crate::encoder::TuneMode;
use crate::error::{Error, Result};
use crate::model::{CapnModel, ModelInputs};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub seed: u64,
    pub classes: usize,
    pub class_counts: Vec<usize>,
    pub mode: TuneMode,
    pub frozen_hash: String,
    pub trainable_params: usize,
    pub blob: String,
    pub config: RunConfig,
    pub arrays: Vec<ArrayEntry>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path minus extension>.bin`.
pub fn save(path: impl AsRef<Path>, model: &CapnModel, cfg: &RunConfig, step: usize, class_counts: &[usize]) -> Result<CheckpointManifest> {
    let path = path.as_ref();
    let blob = blob_path(path);
    let mut arrays = Vec::with_capacity(model.store.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (_, p) in model.store.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            offset,
            shape: p.value.shape().to_vec(),
            trainable: p.trainable,
        });
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += p.value.numel();
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        step,
        seed: cfg.seed,
        classes: model.classes,
        class_counts: class_counts.to_vec(),
        mode: cfg.train.mode,
        frozen_hash: model.store.frozen_hash(),
        trainable_params: model.store.trainable_count(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        config: cfg.clone(),
        arrays,
    };
    std::fs::File::create(&blob)?.write_all(&bytes)?;
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", m.format_version)));
    }
    Ok(m)
}

/// Rebuilds the model described by the manifest and restores every array.
pub fn load(path: impl AsRef<Path>) -> Result<(CapnModel, CheckpointManifest)> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = std::fs::read(&blob_file)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("checkpoint blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let cfg = &manifest.config;
    let inputs = ModelInputs::placeholder(&cfg.model, manifest.classes);
    let mut model = CapnModel::new(cfg.model.clone(), manifest.classes, inputs, cfg.seed)?;
    model.set_mode(manifest.mode)?;
    if model.store.len() != manifest.arrays.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} arrays, model expects {}",
            manifest.arrays.len(),
            model.store.len()
        )));
    }
    for entry in &manifest.arrays {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown array {}", entry.name)))?;
        let n: usize = entry.shape.iter().product();
        let slice = floats
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Format(format!("array {} runs past the blob", entry.name)))?;
        let value = Tensor::new(entry.shape.clone(), slice.iter().map(|&v| f64::from(v)).collect())?;
        model.store.set_value(id, value)?;
        model.store.set_trainable(id, entry.trainable);
    }
    model.graph.adjacency = model.adjacency().clone();
    if model.store.frozen_hash() != manifest.frozen_hash {
        return Err(Error::Format("frozen-parameter hash does not match the manifest".into()));
    }
    Ok((model, manifest))
}
