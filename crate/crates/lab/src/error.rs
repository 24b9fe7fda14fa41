use std::io;
use std::path::PathBuf;

use mtunet_core::checkpoint::CheckpointError;
use mtunet_core::data::DataError;
use mtunet_core::loss::LossError;
use mtunet_core::metrics::MetricError;
use mtunet_core::model::ModelError;
use mtunet_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl LabError {
    /// Stable tag for the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Config(_) => "config",
            LabError::Io { .. } => "io",
            LabError::Csv(_) => "csv",
            LabError::Data(_) => "data",
            LabError::Model(_) => "model",
            LabError::Loss(_) => "loss",
            LabError::Metric(_) => "metric",
            LabError::Checkpoint(_) => "checkpoint",
            LabError::Tensor(_) => "tensor",
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(io::Error) -> LabError + '_ {
    move |source| LabError::Io {
        path: path.to_path_buf(),
        source,
    }
}
