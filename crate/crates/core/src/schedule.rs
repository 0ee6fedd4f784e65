//! Training hyperparameters and the warm-up + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial rate for pretrained parameters (stage 1) or the TINet (stage 2).
    pub base_lr: f64,
    /// Initial rate for randomly initialised stage-1 heads.
    pub head_lr: f64,
    pub warmup_epochs: usize,
    pub tau: f64,
    pub seed: u64,
    /// Optional cap on optimisation steps; the schedule still spans `epochs`.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl TrainConfig {
    /// Fine-tuning defaults.
    pub fn stage1() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            base_lr: 1e-5,
            head_lr: 5e-5,
            warmup_epochs: 5,
            tau: 0.02,
            seed: 0,
            max_steps: None,
        }
    }

    /// Inversion-network defaults.
    pub fn stage2() -> Self {
        Self {
            base_lr: 1e-4,
            head_lr: 1e-4,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = alloc::vec::Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            problems.push("warmup_epochs must be smaller than epochs");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.head_lr > 0.0) {
            problems.push("learning rates must be positive");
        }
        if !(self.tau > 0.0) {
            problems.push("tau must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Learning rate at fractional `epoch` for a schedule starting at `base_lr`:
/// a linear ramp from `base_lr / 10` over the warm-up epochs, then cosine
/// decay to zero at `epochs`.
pub fn lr_at(cfg: &TrainConfig, base_lr: f64, epoch: f64) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::OutOfRange {
            what: "epoch",
            detail: alloc::format!("{epoch} not in [0, {total}]"),
        });
    }
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        let frac = epoch / warm;
        return Ok(base_lr * (0.1 + 0.9 * frac));
    }
    let progress = (epoch - warm) / (total - warm);
    Ok(base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
}
