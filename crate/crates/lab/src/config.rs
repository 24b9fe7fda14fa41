//! Training configuration: a flat JSON object whose keys are the field names
//! below, with the model fields inlined.

use std::fs;
use std::path::{Path, PathBuf};

use mtunet_core::loss::SchemeKind;
use mtunet_core::model::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_err, LabError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    pub scheme: SchemeKind,
    pub lr: f64,
    /// Plateau epochs before the learning rate is cut.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Drives initialization, shuffling and dropout.
    pub seed: u64,
    /// Drives the train/val/test partition, shared across seeds.
    pub split_seed: u64,
    /// Stop at the first plateau after this many learning-rate cuts.
    pub max_reductions: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            scheme: SchemeKind::Mtls3,
            lr: 1e-3,
            patience: 10,
            batch_size: 16,
            max_epochs: 150,
            seed: 0,
            split_seed: 0,
            max_reductions: None,
            dataset: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        self.model.validate()?;
        Ok(())
    }

    /// Merges `overrides` over the keys of `base` (a JSON object) on top of
    /// the defaults. Unknown keys are rejected.
    pub fn from_layers(base: Option<Value>, overrides: Map<String, Value>) -> Result<Self, LabError> {
        let mut merged = match base {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => return Err(LabError::Config("config file must hold a JSON object".into())),
        };
        merged.extend(overrides);
        let known = match serde_json::to_value(Self::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("TrainConfig serializes to an object"),
        };
        if let Some(key) = merged.keys().find(|k| !known.contains_key(*k)) {
            return Err(LabError::Config(format!("unknown key {key:?}")));
        }
        let config: Self =
            serde_json::from_value(Value::Object(merged)).map_err(|e| LabError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: Map<String, Value>) -> Result<Self, LabError> {
        Self::from_layers(Some(read_json(path)?), overrides)
    }
}

pub(crate) fn read_json(path: &Path) -> Result<Value, LabError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}
