//! Linear warm-up followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub cosine: bool,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize, cosine: bool) -> Result<Self> {
        if !(base_lr > 0.0) || !base_lr.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "warm-up ({warmup_steps} steps) must be shorter than training ({total_steps} steps)"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            warmup_steps,
            total_steps,
            cosine,
        })
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(step, self)
    }
}

pub fn lr_at(step: usize, s: &LrSchedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::domain(format!(
            "step {step} beyond schedule end {}",
            s.total_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    if !s.cosine {
        return Ok(s.base_lr);
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
