//! Warmup-then-epoch-decay learning rate.
//!
//! ```text
//! lr(n, epoch) = k1 * d_model^-0.5 * n * warmup^-1.5    if n <= warmup
//!              = k2 * 0.98^floor(epoch / 2)             otherwise
//! ```

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub k1: f64,
    pub k2: f64,
    pub d_model: f64,
    pub warmup: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            k1: 0.2,
            k2: 4e-4,
            d_model: 32.0,
            warmup: 4000,
        }
    }
}

impl ScheduleConfig {
    /// Short-run variant for desk-scale training: same formula with a
    /// compressed warmup whose peak equals the post-warmup rate `k2`.
    pub fn desk() -> Self {
        ScheduleConfig {
            k1: 0.04,
            k2: 1e-3,
            d_model: 32.0,
            warmup: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 || !(self.k1 > 0.0 && self.k2 > 0.0 && self.d_model > 0.0) {
            return Err(Error::Config(format!(
                "schedule needs warmup >= 1 and positive k1, k2, d_model; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Rate at the last warmup step.
    pub fn peak(&self) -> f64 {
        self.k1 * self.d_model.powf(-0.5) * (self.warmup as f64).powf(-0.5)
    }
}

/// Learning rate for 1-based step `n` during integer `epoch`.
pub fn lr_schedule(n: u64, epoch: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("learning-rate step index starts at 1".into()));
    }
    if n <= cfg.warmup {
        Ok(cfg.k1 * cfg.d_model.powf(-0.5) * n as f64 * (cfg.warmup as f64).powf(-1.5))
    } else {
        Ok(cfg.k2 * 0.98f64.powi((epoch / 2) as i32))
    }
}
