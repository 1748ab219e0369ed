//! Teacher-student pre-training: schedules, optimizer, EMA, the training step
//! and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod step;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Branch, CHECKPOINT_MAGIC};
pub use model::{encode_views, is_teacher_param, model_specs, EncodedViews, ModelConfig, ModelState};
pub use optim::{clip_gradients, ema_update, global_norm, AdamW};
pub use step::{build_batch, compute_losses, train_step, Batch, LossBreakdown, Metrics};

use crate::data::AugSpec;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub aug: AugSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 300,
            batch_size: 4,
            lr_start: 2e-4,
            lr_end: 1e-6,
            wd_start: 0.04,
            wd_end: 0.2,
            ema_start: 0.996,
            ema_end: 1.0,
            clip_norm: 3.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            aug: AugSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(invalid!("total_iters and batch_size must be at least 1"));
        }
        let rates = [self.lr_start, self.lr_end, self.clip_norm, self.adam_eps];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(invalid!("learning rates, clip norm and adam eps must be positive"));
        }
        if [self.wd_start, self.wd_end].iter().any(|w| !(*w >= 0.0)) {
            return Err(invalid!("weight decay must be non-negative"));
        }
        if [self.ema_start, self.ema_end].iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return Err(invalid!("EMA momentum must lie in (0, 1]"));
        }
        if [self.beta1, self.beta2].iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(invalid!("adam betas must lie in [0, 1)"));
        }
        self.aug.validate()
    }

    pub fn lr(&self, t: usize) -> f64 {
        cosine_schedule(t, self.total_iters, self.lr_start, self.lr_end)
    }

    pub fn weight_decay(&self, t: usize) -> f64 {
        cosine_schedule(t, self.total_iters, self.wd_start, self.wd_end)
    }

    pub fn ema_momentum(&self, t: usize) -> f64 {
        cosine_schedule(t, self.total_iters, self.ema_start, self.ema_end)
    }
}

/// `v1 + (v0 − v1)·(1 + cos(π·t/T))/2`, clamped to `t ≤ T`; `T = 0` yields `v0`.
pub fn cosine_schedule(t: usize, total: usize, v0: f64, v1: f64) -> f64 {
    if total == 0 {
        return v0;
    }
    if t == 0 {
        return v0;
    }
    if t >= total {
        return v1;
    }
    let c = (std::f64::consts::PI * t as f64 / total as f64).cos();
    v1 + (v0 - v1) * (1.0 + c) / 2.0
}
