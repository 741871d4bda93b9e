//! Momentum SGD with layer-wise adaptive rate scaling (LARS) and a linear
//! warmup followed by cosine decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

pub const LARS_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimCfg {
    /// Learning rate for a batch of 256; scaled linearly with `batch_size`.
    pub base_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub nesterov: bool,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub lars_enabled: bool,
    pub lars_trust_coeff: f64,
}

impl Default for OptimCfg {
    fn default() -> Self {
        Self {
            base_lr: 1.0,
            batch_size: 64,
            momentum: 0.9,
            nesterov: false,
            warmup_epochs: 10,
            total_epochs: 20,
            weight_decay: 1e-6,
            lars_enabled: true,
            lars_trust_coeff: 0.001,
        }
    }
}

impl OptimCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lars_trust_coeff > 0.0) {
            return Err(Error::Config("momentum, weight_decay or lars_trust_coeff out of range".into()));
        }
        Ok(())
    }

    /// `base_lr · B / 256`.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        Schedule {
            peak: self.peak_lr(),
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.total_epochs * steps_per_epoch,
        }
    }
}

/// Step-indexed learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Linear ramp from 0 to the peak over warmup, then cosine decay reaching 0
/// at `total_steps`.
pub fn lr_at(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return if step < s.total_steps { s.peak } else { 0.0 };
    }
    let frac = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Momentum buffers keyed by parameter name.
pub type MomentumState = BTreeMap<String, Tensor>;

/// Per-tensor trust ratio `η‖w‖ / (‖∇w‖ + wd‖w‖ + eps)`.
pub fn lars_local_lr(w_norm: f64, g_norm: f64, weight_decay: f64, trust: f64) -> f64 {
    trust * w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)
}

/// One update of every parameter that has a gradient. Parameters missing
/// from `grads` are left untouched. Any non-finite gradient aborts the step
/// before anything is modified.
pub fn lars_sgd_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    cfg: &OptimCfg,
    state: &mut MomentumState,
) -> Result<()> {
    for (name, g) in grads {
        let w = store
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if w.shape() != g.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                g.shape(),
                w.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for (name, g) in grads {
        let flags = store.flags(name);
        let w = store.get_mut(name).expect("checked above");
        let wd = if flags.no_weight_decay { 0.0 } else { cfg.weight_decay };
        let local = if cfg.lars_enabled && !flags.exclude_from_lars {
            lars_local_lr(w.norm(), g.norm(), wd, cfg.lars_trust_coeff)
        } else {
            1.0
        };
        let scale = local * lr;
        let v = state
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let step = scale * (gi + wd * *wi);
            *vi = cfg.momentum * *vi + step;
            *wi -= if cfg.nesterov { cfg.momentum * *vi + step } else { *vi };
        }
    }
    Ok(())
}
