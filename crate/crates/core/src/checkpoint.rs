//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` and `weights.bin`.
//! The manifest names every parameter (network weights first, then the two
//! uncertainty scalars) with its shape; `weights.bin` is the concatenation,
//! in manifest order, of each parameter's values as little-endian `f32`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::loss::{SchemeKind, Sigmas};
use crate::model::{Model, ModelConfig, ModelError};
use crate::optim::Checkpoint;
use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT: &str = "mtunet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("weights blob has {got} bytes, manifest expects {expected}")]
    Truncated { got: usize, expected: usize },
    #[error("weights checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub id: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub scheme: SchemeKind,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Vec<ParamEntry>,
    pub weights_sha256: String,
}

/// Everything needed to rebuild a trained network.
#[derive(Clone, Debug)]
pub struct SavedModel {
    pub model: Model<f32>,
    pub sigmas: Sigmas<f32>,
    pub scheme: SchemeKind,
    pub epoch: usize,
    pub val_loss: f64,
}

pub fn save(
    dir: &Path,
    model: &Model<f32>,
    sigmas: &Sigmas<f32>,
    scheme: SchemeKind,
    epoch: usize,
    val_loss: f64,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut params = Vec::new();
    let mut blob = Vec::with_capacity(4 * (model.parameter_count() + 2));
    for p in model.params().iter().chain(sigmas.store().iter()) {
        params.push(ParamEntry {
            id: p.name().to_string(),
            shape: p.value().shape().to_vec(),
        });
        for v in p.value().data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.config().clone(),
        scheme,
        epoch,
        val_loss,
        params,
        weights_sha256: hex::encode(Sha256::digest(&blob)),
    };
    let weights = dir.join(WEIGHTS_FILE);
    fs::write(&weights, &blob).map_err(io_err(&weights))?;
    let path = dir.join(MANIFEST_FILE);
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    fs::write(&path, json).map_err(io_err(&path))
}

/// Writes an in-memory [`Checkpoint`] for the given architecture.
pub fn save_checkpoint(
    dir: &Path,
    config: &ModelConfig,
    scheme: SchemeKind,
    checkpoint: &Checkpoint<f32>,
) -> Result<(), CheckpointError> {
    let mut model = Model::<f32>::build(config, &mut SeededRng::new(0))?;
    let mut sigmas = Sigmas::new();
    crate::optim::restore(&mut model, &mut sigmas, checkpoint)?;
    save(
        dir,
        &model,
        &sigmas,
        scheme,
        checkpoint.epoch,
        checkpoint.val_loss,
    )
}

pub fn load(dir: &Path) -> Result<SavedModel, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(CheckpointError::Manifest(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let weights = dir.join(WEIGHTS_FILE);
    let blob = fs::read(&weights).map_err(io_err(&weights))?;
    let expected: usize = manifest
        .params
        .iter()
        .map(|p| 4 * p.shape.iter().product::<usize>())
        .sum();
    if blob.len() != expected {
        return Err(CheckpointError::Truncated {
            got: blob.len(),
            expected,
        });
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.weights_sha256 {
        return Err(CheckpointError::Checksum);
    }

    let mut model = Model::<f32>::build(&manifest.model, &mut SeededRng::new(0))?;
    let mut sigmas = Sigmas::<f32>::new();
    let n_model = model.params().len();
    if manifest.params.len() != n_model + sigmas.store().len() {
        return Err(CheckpointError::Manifest(format!(
            "{} parameters listed, architecture has {}",
            manifest.params.len(),
            n_model + sigmas.store().len()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.params.len());
    let mut offset = 0;
    let names = model
        .params()
        .iter()
        .chain(sigmas.store().iter())
        .map(|p| p.name());
    for (entry, name) in manifest.params.iter().zip(names) {
        if entry.id != name {
            return Err(CheckpointError::Manifest(format!(
                "parameter {} where {name} was expected",
                entry.id
            )));
        }
        let n: usize = entry.shape.iter().product();
        let data = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * n;
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    let sigma_values = tensors.split_off(n_model);
    model.params_mut().load_values(&tensors)?;
    sigmas.store_mut().load_values(&sigma_values)?;
    Ok(SavedModel {
        model,
        sigmas,
        scheme: manifest.scheme,
        epoch: manifest.epoch,
        val_loss: manifest.val_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn tiny() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            depth: 2,
            base_features: 2,
            num_classes: 3,
            variant: Variant::Mt,
            dropout_rate: 0.25,
            head_hidden: 4,
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::build(&tiny(), &mut SeededRng::new(5)).unwrap();
        let mut sigmas = Sigmas::new();
        sigmas
            .store_mut()
            .iter_mut()
            .next()
            .unwrap()
            .value_mut()
            .data_mut()[0] = 0.123_456_79;
        save(dir.path(), &model, &sigmas, SchemeKind::Mtls1, 7, 0.5).unwrap();
        let back = load(dir.path()).unwrap();
        let bits = |v: &[Tensor<f32>]| -> Vec<u32> {
            v.iter()
                .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
                .collect()
        };
        assert_eq!(
            bits(&back.model.params().values()),
            bits(&model.params().values())
        );
        assert_eq!(
            bits(&back.sigmas.store().values()),
            bits(&sigmas.store().values())
        );
        assert_eq!(
            (back.epoch, back.val_loss, back.scheme),
            (7, 0.5, SchemeKind::Mtls1)
        );
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::build(&tiny(), &mut SeededRng::new(5)).unwrap();
        save(dir.path(), &model, &Sigmas::new(), SchemeKind::Mtls3, 1, 1.0).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&w).unwrap();
        blob.truncate(blob.len() - 4);
        fs::write(&w, &blob).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::build(&tiny(), &mut SeededRng::new(5)).unwrap();
        save(dir.path(), &model, &Sigmas::new(), SchemeKind::Mtls3, 1, 1.0).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let mut blob = fs::read(&w).unwrap();
        blob[0] ^= 0xff;
        fs::write(&w, &blob).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Checksum)));
    }
}
