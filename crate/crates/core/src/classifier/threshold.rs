use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Timestep-aware retrieval threshold: rises quadratically from `alpha_min`
/// at t = 0 to 0.5 at t ≥ T.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub alpha_min: f64,
    /// Mean target length of the validation split.
    #[serde(rename = "T")]
    pub t_mean: f64,
}

impl ThresholdSchedule {
    pub fn new(alpha_min: f64, t_mean: f64) -> Result<Self> {
        let s = Self { alpha_min, t_mean };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.5).contains(&self.alpha_min) {
            return Err(Error::config(format!(
                "alpha_min {} must be in [0, 0.5]",
                self.alpha_min
            )));
        }
        if !(self.t_mean > 0.0 && self.t_mean.is_finite()) {
            return Err(Error::config("T must be positive"));
        }
        Ok(())
    }

    /// `α_min + clip(t / T, 0, 1)² · (0.5 − α_min)`.
    pub fn threshold_at(&self, t: usize) -> f64 {
        let c = (t as f64 / self.t_mean).clamp(0.0, 1.0);
        self.alpha_min + c * c * (0.5 - self.alpha_min)
    }
}

pub fn threshold_at(sched: &ThresholdSchedule, t: usize) -> f64 {
    sched.threshold_at(t)
}
