//! Experiment harness for the multi-task saliency/classification network:
//! training, evaluation, ablation sweeps and the σ-dynamics lab.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablate;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod sigma_lab;
pub mod train;

pub use config::TrainConfig;
pub use error::LabError;
pub use train::{train, LogRow, TrainOutcome, TrainingLog};
