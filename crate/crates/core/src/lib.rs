//! Multi-task saliency and classification laboratory.
//!
//! The crate provides a small reverse-mode autodiff engine, the MT-UNet
//! network with its ablation variants, uncertainty-weighted loss schemes,
//! Adam with a reduce-on-plateau/rollback scheduler, evaluation metrics and
//! a synthetic dual-task dataset.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use rng::SeededRng;
pub use tensor::{ParamId, ParamStore, Parameter, Real, Tape, Tensor, TensorError, Var};
