use crate::error::{Error, Result};

/// Triangular cyclical learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LRSchedule {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Optimizer steps per half cycle.
    pub step_size: usize,
}

impl Default for LRSchedule {
    fn default() -> Self {
        LRSchedule {
            base_lr: 6e-4,
            max_lr: 1.2e-3,
            step_size: 10,
        }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.step_size == 0 {
            return Err(Error::config("learning-rate step size must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < base_lr <= max_lr, got {} and {}",
                self.base_lr, self.max_lr
            )));
        }
        Ok(())
    }
}

/// `base + (max - base) * max(0, 1 - |step / step_size mod 2 - 1|)`, which
/// starts at `base`, peaks at `max` after `step_size` steps and returns to
/// `base` after `2 * step_size`.
pub fn cyclical_lr(step: usize, s: &LRSchedule) -> f64 {
    let x = (step as f64 / s.step_size as f64) % 2.0;
    s.base_lr + (s.max_lr - s.base_lr) * (1.0 - (x - 1.0).abs()).max(0.0)
}
