//! Learning-rate and attention-γ schedules, indexed by 0-based epoch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("milestones must be strictly increasing, got {0:?}")]
    Milestones(Vec<usize>),
    #[error("{0} must be positive and finite")]
    NonPositive(&'static str),
}

/// Step decay: `base_lr · factor^(milestones passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factor: f64) -> Result<Self, ScheduleError> {
        if !(base_lr.is_finite() && base_lr > 0.0) {
            return Err(ScheduleError::NonPositive("base_lr"));
        }
        if !(factor.is_finite() && factor > 0.0) {
            return Err(ScheduleError::NonPositive("factor"));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScheduleError::Milestones(milestones));
        }
        Ok(Self {
            base_lr,
            milestones,
            factor,
        })
    }

    /// 3e-4, halved at 105, 150, 175 and 190.
    pub fn mpii() -> Self {
        Self::new(3e-4, vec![105, 150, 175, 190], 0.5).expect("valid preset")
    }

    /// 2e-4, times 0.4 at 120, 160 and 190.
    pub fn coco() -> Self {
        Self::new(2e-4, vec![120, 160, 190], 0.4).expect("valid preset")
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

/// Freeze, then linear ramp, then free training of the Non-Local γ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub freeze_epochs: usize,
    pub ramp_epochs: usize,
    pub ramp_target: f32,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self {
            freeze_epochs: 10,
            ramp_epochs: 50,
            ramp_target: 0.2,
        }
    }
}

impl GammaSchedule {
    /// First epoch in which γ is trainable.
    pub fn release_epoch(&self) -> usize {
        self.freeze_epochs + self.ramp_epochs
    }

    /// `(value, trainable)` for `epoch`; `current` is returned once γ is free.
    ///
    /// At the release epoch itself the value is the ramp target, which the
    /// caller writes before γ starts learning.
    pub fn at_epoch(&self, epoch: usize, current: f32) -> (f32, bool) {
        let release = self.release_epoch();
        if epoch < self.freeze_epochs {
            (0.0, false)
        } else if epoch < release {
            let t = (epoch - self.freeze_epochs) as f64 / self.ramp_epochs as f64;
            ((self.ramp_target as f64 * t) as f32, false)
        } else if epoch == release {
            (self.ramp_target, true)
        } else {
            (current, true)
        }
    }

    /// Whether the schedule overwrites γ at the start of `epoch`.
    pub fn pins(&self, epoch: usize) -> bool {
        epoch <= self.release_epoch()
    }
}
