//! Optimisation: schedule, losses, SGD, augmentation and the training loop.

mod augment;
mod loss;
mod optim;
mod run;

pub use augment::{augment, flip_horizontal, resize_sample, Augmented};
pub use loss::{downsample_labels, ohem_loss, ohem_select, total_loss, LossParts};
pub use optim::{sgd_step, OptimState};
pub use run::{BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, NAN_DUMP, evaluate, train_loop, LogRow, TrainSummary};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub power: f64,
    pub ohem_keep_frac: f64,
    /// Weight of the auxiliary heads' loss.
    pub aux_weight: f64,
    pub crop_size: usize,
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
    pub seed: u64,
    /// Validate every this many iterations (and after the last one).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_iters: 2000,
            batch_size: 4,
            power: 0.9,
            ohem_keep_frac: 0.1,
            aux_weight: 0.4,
            crop_size: 64,
            scale_range: [0.75, 2.0],
            flip_prob: 0.5,
            seed: 0,
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.ohem_keep_frac > 0.0 && self.ohem_keep_frac <= 1.0) {
            errs.push(format!("train.ohem_keep_frac must be in (0, 1] (got {})", self.ohem_keep_frac));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            errs.push(format!("train.scale_range must satisfy 0 < min <= max (got {:?})", self.scale_range));
        }
        if self.batch_size == 0 {
            errs.push("train.batch_size must be positive".into());
        }
        if self.crop_size == 0 || self.crop_size % 32 != 0 {
            errs.push(format!("train.crop_size must be a positive multiple of 32 (got {})", self.crop_size));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            errs.push(format!("train.flip_prob must be in [0, 1] (got {})", self.flip_prob));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            errs.push("train.base_lr and train.weight_decay must be >= 0 and train.momentum in [0, 1)".into());
        }
        if !(self.power > 0.0) {
            errs.push(format!("train.power must be positive (got {})", self.power));
        }
        if !(self.aux_weight >= 0.0) {
            errs.push(format!("train.aux_weight must be >= 0 (got {})", self.aux_weight));
        }
        if self.eval_interval == 0 {
            errs.push("train.eval_interval must be positive".into());
        }
        errs
    }
}

/// `base · (1 − iter/total)^power`.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> Result<f64> {
    if total == 0 || iter > total {
        return Err(invalid!("poly_lr: iteration {iter} outside 0..={total}"));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}
