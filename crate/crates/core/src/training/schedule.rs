use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default warm-up length in optimizer steps.
pub const DEFAULT_WARMUP: usize = 1000;

/// Linear warm-up from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps > total_steps {
            return Err(Error::Contract(format!(
                "warm-up {warmup_steps} must lie in 1..={total_steps}"
            )));
        }
        if !(peak_lr > 0.0 && peak_lr.is_finite()) {
            return Err(Error::Contract(format!(
                "peak learning rate {peak_lr} must be positive"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Schedule for a phase of `total_steps`. Phases shorter than `warmup`
    /// steps warm up over a tenth of their length instead.
    pub fn for_phase(peak_lr: f64, warmup: usize, total_steps: usize) -> Result<Self> {
        let total_steps = total_steps.max(1);
        let warmup = if total_steps < warmup {
            (total_steps / 10).max(1)
        } else {
            warmup.max(1)
        };
        Self::new(peak_lr, warmup, total_steps)
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule end {}",
                self.total_steps
            )));
        }
        if step <= self.warmup_steps {
            return Ok(self.peak_lr * (step as f64 / self.warmup_steps as f64));
        }
        let remaining = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak_lr * (remaining / span))
    }
}
