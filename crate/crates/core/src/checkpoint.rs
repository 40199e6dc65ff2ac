//! Checkpoints: a JSON manifest naming every tensor with its shape and
//! byte offset into a little-endian f32 blob, plus run metadata.
//!
//! Readers locate tensors by offset only, so manifest order is free.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_file, write_file};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Parameterized;
use crate::tensor::Tensor;
use crate::trainer::EpochMetrics;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f32";
const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Epoch whose updates these parameters include.
    pub epoch: usize,
    pub config_hash: String,
    pub model: ModelConfig,
    pub metrics: Vec<EpochMetrics>,
    /// Epoch with the lowest test loss so far.
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub blob: String,
    pub entries: Vec<ManifestEntry>,
    pub meta: CheckpointMeta,
}

/// Writes `dir/manifest.json` and `dir/params.f32`, entries in
/// lexicographic path order.
pub fn save_checkpoint(dir: &Path, model: &Model, meta: CheckpointMeta) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    model.visit("", &mut |path, t, _| {
        tensors.insert(path.to_string(), t.clone());
    });
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (path, t) in tensors {
        entries.push(ManifestEntry {
            path,
            shape: t.shape().to_array(),
            dtype: DTYPE.into(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        blob: BLOB_FILE.into(),
        entries,
        meta,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(BLOB_FILE), &blob)?;
    write_file(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let bytes = read_file(&dir.join(MANIFEST_FILE))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CheckpointError::CorruptManifest(e.to_string()).into())
}

/// Rebuilds the model described by the checkpoint's own config.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(manifest.meta.model.clone())?;
    load_into(dir, &manifest, &mut model)?;
    Ok((model, manifest.meta))
}

/// Loads the checkpoint into a model built from `config`; any shape
/// disagreement is a checkpoint error.
pub fn load_for_config(dir: &Path, config: &ModelConfig) -> Result<(Model, CheckpointMeta)> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::new(config.clone())?;
    load_into(dir, &manifest, &mut model)?;
    Ok((model, manifest.meta))
}

fn load_into(dir: &Path, manifest: &Manifest, model: &mut Model) -> Result<()> {
    let blob = read_file(&dir.join(&manifest.blob))?;
    let mut by_path: BTreeMap<&str, &ManifestEntry> = BTreeMap::new();
    for e in &manifest.entries {
        if e.dtype != DTYPE {
            return Err(CheckpointError::CorruptManifest(format!(
                "{}: unsupported dtype {}",
                e.path, e.dtype
            ))
            .into());
        }
        if by_path.insert(&e.path, e).is_some() {
            return Err(
                CheckpointError::CorruptManifest(format!("duplicate entry {}", e.path)).into(),
            );
        }
    }
    let mut known = Vec::new();
    let mut failure: Option<CheckpointError> = None;
    model.visit_mut("", &mut |path, t, _| {
        if failure.is_some() {
            return;
        }
        known.push(path.to_string());
        let Some(e) = by_path.get(path) else {
            failure = Some(CheckpointError::MissingEntry(path.into()));
            return;
        };
        let expected = t.shape().to_array();
        if e.shape != expected {
            failure = Some(CheckpointError::ShapeMismatch {
                path: path.into(),
                expected,
                found: e.shape,
            });
            return;
        }
        let end = e.offset + t.len() * 4;
        if end > blob.len() {
            failure = Some(CheckpointError::TruncatedBlob {
                expected: end,
                found: blob.len(),
            });
            return;
        }
        for (v, b) in t
            .data_mut()
            .iter_mut()
            .zip(blob[e.offset..end].chunks_exact(4))
        {
            *v = f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
    });
    if let Some(f) = failure {
        return Err(f.into());
    }
    if let Some(extra) = by_path.keys().find(|p| !known.iter().any(|k| k == *p)) {
        return Err(CheckpointError::UnknownEntry(extra.to_string()).into());
    }
    Ok(())
}

/// `dir/epoch-NNN`.
pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch-{epoch:03}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputShape, Task};

    fn small() -> ModelConfig {
        let mut cfg = ModelConfig::mnist();
        cfg.input = InputShape {
            height: 8,
            width: 8,
            channels: 1,
        };
        cfg.blocks.layer_count = 2;
        cfg.blocks.growth_rate = 4;
        cfg.stem_channels = 4;
        cfg
    }

    fn meta(cfg: &ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            epoch: 0,
            config_hash: cfg.hash(),
            model: cfg.clone(),
            metrics: Vec::new(),
            best_epoch: None,
        }
    }

    #[test]
    fn round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(small()).unwrap();
        save_checkpoint(dir.path(), &model, meta(&model.config)).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.config_hash, model.config.hash());
        let mut originals = BTreeMap::new();
        model.visit("", &mut |p, t, _| {
            originals.insert(p.to_string(), t.clone());
        });
        back.visit("", &mut |p, t, _| {
            let o = &originals[p];
            for (a, b) in o.data().iter().zip(t.data()) {
                assert_eq!(*b, f64::from(*a as f32), "{p}");
            }
        });
        let manifest = read_manifest(dir.path()).unwrap();
        let paths: Vec<_> = manifest.entries.iter().map(|e| e.path.clone()).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
    }

    #[test]
    fn truncated_blob_and_corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(small()).unwrap();
        save_checkpoint(dir.path(), &model, meta(&model.config)).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(CheckpointError::TruncatedBlob { .. }))
        ));
        fs::write(dir.path().join(MANIFEST_FILE), b"{not json").unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Checkpoint(CheckpointError::CorruptManifest(_)))
        ));
    }

    #[test]
    fn reordered_manifest_still_loads() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(small()).unwrap();
        save_checkpoint(dir.path(), &model, meta(&model.config)).unwrap();
        let (reference, _) = load_checkpoint(dir.path()).unwrap();
        let mut manifest = read_manifest(dir.path()).unwrap();
        manifest.entries.swap(0, 3);
        manifest.entries.reverse();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_vec(&manifest).unwrap(),
        )
        .unwrap();
        let (back, _) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params, reference.params);
    }

    #[test]
    fn mismatched_config_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(small()).unwrap();
        save_checkpoint(dir.path(), &model, meta(&model.config)).unwrap();
        let mut other = small();
        other.task = Task::Classify { classes: 7 };
        assert!(matches!(
            load_for_config(dir.path(), &other),
            Err(Error::Checkpoint(CheckpointError::ShapeMismatch { .. }))
        ));
        let mut deeper = small();
        deeper.blocks.layer_count = 3;
        assert!(matches!(
            load_for_config(dir.path(), &deeper),
            Err(Error::Checkpoint(_))
        ));
    }
}
