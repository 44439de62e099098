use serde::{Deserialize, Serialize};

use crate::linalg::l2_norm;
use crate::model::DecoderStepOutput;

/// The three scalar inputs of the skip classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Probability of the base model's top-1 token.
    pub p_top1: f64,
    /// L2 norm of the decoder state.
    pub h_norm: f64,
    /// Largest cross-attention weight.
    pub max_attn: f64,
}

impl FeatureVector {
    pub const LEN: usize = 3;

    pub fn to_array(self) -> [f64; 3] {
        [self.p_top1, self.h_norm, self.max_attn]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self {
            p_top1: a[0],
            h_norm: a[1],
            max_attn: a[2],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.p_top1)
            && (0.0..=1.0).contains(&self.max_attn)
            && self.h_norm >= 0.0
    }
}

pub fn extract_features(step: &DecoderStepOutput) -> FeatureVector {
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    FeatureVector {
        p_top1: max(&step.dist),
        h_norm: l2_norm(&step.hidden),
        max_attn: max(&step.attn),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let mut hidden = vec![0.0; 8];
        hidden[0] = 3.0;
        hidden[1] = 4.0;
        let step = DecoderStepOutput {
            hidden,
            dist: vec![0.01; 100],
            attn: vec![0.2, 0.5, 0.3],
        };
        let f = extract_features(&step);
        assert!((f.p_top1 - 0.01).abs() < 1e-15);
        assert_eq!(f.h_norm, 5.0);
        assert_eq!(f.max_attn, 0.5);
        assert!(f.is_valid());
    }
}
