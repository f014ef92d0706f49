//! Checkpoint directory: `manifest.json` plus one little-endian float32 blob
//! per named parameter array.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{ModelConfig, ModelState, TaskAdapter};
use crate::error::{Error, Result};
use crate::params::Parameters;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub task_count: usize,
    pub task_sizes: Vec<usize>,
    pub arrays: Vec<ArrayEntry>,
}

fn corrupt(path: &Path, message: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.into(),
        message: message.into(),
    }
}

pub fn save_checkpoint(state: &ModelState, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut arrays = Vec::new();
    for p in state.params() {
        let file = format!("{}.f32", p.name);
        let bytes: Vec<u8> = p
            .data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        arrays.push(ArrayEntry {
            name: p.name,
            shape: p.shape,
            dtype: "f32le".into(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: state.config,
        task_count: state.adapters.len(),
        task_sizes: state.task_sizes(),
        arrays,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            message: e.to_string(),
        })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Manifest {
            path,
            message: format!("unsupported checkpoint version {}", manifest.version),
        });
    }
    if manifest.task_count != manifest.task_sizes.len() {
        return Err(corrupt(&path, "task count disagrees with the adapter list"));
    }
    Ok(manifest)
}

/// Rebuilds the model; every array listed by the model must be present with
/// a matching shape and an exactly sized blob.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelState> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut state = ModelState::new(manifest.config, 0)?;
    let d = state.dim();
    let mut start = 0;
    for &n in &manifest.task_sizes {
        state.adapters.push(TaskAdapter {
            w_mu: ndarray::Array2::zeros((d, d)),
            w_sigma: ndarray::Array2::zeros((d, d)),
            trainable: false,
            class_range: start..start + n,
        });
        start += n;
    }
    let manifest_path = dir.join(MANIFEST);
    let expected = state.params().len();
    if manifest.arrays.len() != expected {
        return Err(corrupt(
            &manifest_path,
            format!(
                "{} arrays listed, model needs {expected}",
                manifest.arrays.len()
            ),
        ));
    }
    for p in state.params_mut() {
        let entry = manifest
            .arrays
            .iter()
            .find(|a| a.name == p.name)
            .ok_or_else(|| corrupt(&manifest_path, format!("missing array {}", p.name)))?;
        if entry.shape != p.shape || entry.dtype != "f32le" {
            return Err(corrupt(
                &manifest_path,
                format!(
                    "{}: {:?} {} vs expected {:?} f32le",
                    p.name, entry.shape, entry.dtype, p.shape
                ),
            ));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != p.data.len() * 4 {
            return Err(corrupt(
                &path,
                format!(
                    "blob holds {} bytes, expected {}",
                    bytes.len(),
                    p.data.len() * 4
                ),
            ));
        }
        for (v, c) in p.data.iter_mut().zip(bytes.chunks_exact(4)) {
            let x = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !x.is_finite() {
                return Err(Error::NonFinite { path: path.clone() });
            }
            *v = f64::from(x);
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::forward;
    use crate::rng::chacha;
    use crate::vga::VgaConfig;
    use ndarray::{Array2, Array3};

    fn model() -> ModelState {
        let mut cfg = ModelConfig::for_dim(8);
        cfg.vga = VgaConfig {
            ffn_dim: 16,
            ..VgaConfig::for_dim(8)
        };
        let mut state = ModelState::new(cfg, 3).unwrap();
        let mut rng = chacha(1);
        for n in [2, 3] {
            let t = Array3::from_shape_fn((n, 3, 8), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
            state.add_task(n, t.view(), 9).unwrap();
        }
        state
    }

    #[test]
    fn round_trip_is_bitwise() {
        let state = model();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_checkpoint(&state, dir.path()).unwrap();
        assert_eq!(manifest.task_count, 2);
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.to_bytes(), state.to_bytes());
        let images = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let texts = vec![
            Array2::from_elem((2, 8), 0.3),
            Array2::from_elem((3, 8), -0.2),
        ];
        let a = forward(&state, images.view(), &texts, 2, &mut chacha(5)).unwrap();
        let b = forward(&loaded, images.view(), &texts, 2, &mut chacha(5)).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let state = model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let blob = dir.path().join("adapters.1.w_mu.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn task_count_mismatch_is_detected() {
        let state = model();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let mut m: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.task_count = 3;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(Error::Corrupt { .. })
        ));
    }
}
