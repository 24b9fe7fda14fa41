//! Adam and a reduce-on-plateau scheduler that rolls parameters back to the
//! best validation epoch.

use serde::{Deserialize, Serialize};

use crate::loss::Sigmas;
use crate::model::Model;
use crate::tensor::{Parameter, Real, Tensor, TensorError};

/// Bias-corrected Adam with the usual defaults.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Steps taken since construction or the last [`Adam::reset`].
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Zeroes both moments and the step counter.
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Updates every parameter from its gradient, then zeroes the gradients.
    /// Parameters must be passed in the same order on every call.
    pub fn step<'a, I>(&mut self, params: I)
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);

        for (slot, p) in params.into_iter().enumerate() {
            if self.m.len() <= slot {
                self.m.push(vec![T::zero(); p.numel()]);
                self.v.push(vec![T::zero(); p.numel()]);
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            assert_eq!(m.len(), p.numel(), "parameter order changed between steps");
            let (value, grad) = p.value_and_grad_mut();
            for (((w, g), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * *g;
                *vi = b2 * *vi + one_b2 * *g * *g;
                *w = *w - step_size * *mi / ((*vi).sqrt() * inv_bc2_sqrt + eps);
                *g = T::zero();
            }
        }
    }
}

/// Snapshot of every network and σ value.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Vec<Tensor<T>>,
    pub sigmas: Vec<Tensor<T>>,
    pub epoch: usize,
    pub val_loss: f64,
}

pub fn snapshot<T: Real>(model: &Model<T>, sigmas: &Sigmas<T>, epoch: usize, val_loss: f64) -> Checkpoint<T> {
    Checkpoint {
        model: model.params().values(),
        sigmas: sigmas.store().values(),
        epoch,
        val_loss,
    }
}

pub fn restore<T: Real>(
    model: &mut Model<T>,
    sigmas: &mut Sigmas<T>,
    checkpoint: &Checkpoint<T>,
) -> Result<(), TensorError> {
    model.params_mut().load_values(&checkpoint.model)?;
    sigmas.store_mut().load_values(&checkpoint.sigmas)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlrpConfig {
    pub patience: usize,
    pub factor: f64,
    /// An epoch improves only if `val_loss < best - min_delta`.
    pub min_delta: f64,
    pub rollback: bool,
    /// Reductions never take the rate below this.
    pub min_lr: f64,
}

impl Default for RlrpConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.1,
            min_delta: 0.0,
            rollback: true,
            min_lr: 1e-7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RlrpAction {
    None,
    /// Learning rate reduced; restore [`Rlrp::best_checkpoint`] when
    /// rollback is enabled.
    ReduceAndRollback {
        lr_before: f64,
        lr_after: f64,
    },
}

/// Reduce-on-plateau with best-epoch rollback.
#[derive(Clone, Debug)]
pub struct Rlrp<T> {
    config: RlrpConfig,
    lr: f64,
    best: Option<(usize, f64)>,
    bad_epochs: usize,
    reductions: usize,
    best_checkpoint: Option<Checkpoint<T>>,
}

impl<T: Real> Rlrp<T> {
    pub fn new(config: RlrpConfig, lr: f64) -> Self {
        assert!(config.patience >= 1, "patience must be at least 1");
        assert!(
            config.factor > 0.0 && config.factor < 1.0,
            "factor must lie in (0, 1)"
        );
        Self {
            config,
            lr,
            best: None,
            bad_epochs: 0,
            reductions: 0,
            best_checkpoint: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    pub fn best_checkpoint(&self) -> Option<&Checkpoint<T>> {
        self.best_checkpoint.as_ref()
    }

    /// Records one epoch's validation loss. `capture` is called only when
    /// the epoch is a new best.
    pub fn observe(
        &mut self,
        epoch: usize,
        val_loss: f64,
        capture: impl FnOnce() -> Checkpoint<T>,
    ) -> RlrpAction {
        let improved = match self.best {
            None => true,
            Some((_, best)) => val_loss < best - self.config.min_delta,
        };
        if improved {
            self.best = Some((epoch, val_loss));
            self.bad_epochs = 0;
            if self.config.rollback {
                self.best_checkpoint = Some(capture());
            }
            return RlrpAction::None;
        }
        self.bad_epochs += 1;
        if self.bad_epochs < self.config.patience {
            return RlrpAction::None;
        }
        self.bad_epochs = 0;
        let lr_before = self.lr;
        self.lr = (self.lr * self.config.factor).max(self.config.min_lr.min(lr_before));
        self.reductions += 1;
        RlrpAction::ReduceAndRollback {
            lr_before,
            lr_after: self.lr,
        }
    }
}
