use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const P_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossConfig {
    /// Class weights indexed by label: `[skip, conduct]`.
    pub alpha: [f64; 2],
    pub gamma: f64,
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::config("focal alpha weights must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("focal gamma must be non-negative"));
        }
        Ok(())
    }

    /// Inverse-frequency weights: the rarer class gets the larger weight.
    pub fn balanced(n_skip: usize, n_conduct: usize, gamma: f64) -> Self {
        let n = (n_skip + n_conduct).max(1) as f64;
        Self {
            alpha: [n_conduct as f64 / n, n_skip as f64 / n],
            gamma,
        }
    }
}

/// `−α_c (1 − p_c)^γ ln p_c`, with `p_c` clamped to [`P_MIN`].
pub fn focal_loss(p_c: f64, cfg: &FocalLossConfig, c: Label) -> f64 {
    let p = p_c.max(P_MIN);
    -cfg.alpha[c as usize] * (1.0 - p).powf(cfg.gamma) * p.ln()
}

/// `∂L/∂p_c · p_c`: the factor that multiplies `(δ_cj − p_j)` in the logit
/// gradient. Written without dividing by `p_c`, so γ = 0 yields exactly `−α`.
pub(crate) fn focal_grad_factor(p_c: f64, cfg: &FocalLossConfig, c: Label) -> f64 {
    let p = p_c.max(P_MIN);
    let q = 1.0 - p;
    let modulating = if cfg.gamma > 0.0 && q > 0.0 {
        cfg.gamma * q.powf(cfg.gamma - 1.0) * p * p.ln()
    } else {
        0.0
    };
    cfg.alpha[c as usize] * (modulating - q.powf(cfg.gamma))
}
