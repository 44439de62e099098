//! Neighbor lists to vocabulary distributions, and interpolation with the
//! base model.
//!
//! `temperature` divides the datastore's *squared* L2 distance, so its useful
//! range differs from setups that use plain L2.

use serde::{Deserialize, Serialize};

use crate::datastore::Neighbor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 10.0,
            lambda: 0.7,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("knn.k must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("knn.temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("knn.lambda must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        crate::linalg::argmax(&self.probs)
    }

    pub fn is_simplex(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// `p(v) ∝ Σ_{neighbors with value v} exp(-(d - d_min) / τ)`.
///
/// Shifting by the smallest distance leaves the normalized result unchanged
/// and keeps the largest weight at exactly 1.
pub fn knn_distribution(
    neighbors: &[Neighbor],
    temperature: f64,
    vocab_size: usize,
) -> Result<Distribution> {
    if neighbors.is_empty() {
        return Err(Error::validation(
            "kNN distribution needs at least one neighbor",
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::validation("temperature must be positive"));
    }
    let d_min = neighbors
        .iter()
        .map(|n| n.distance)
        .fold(f64::INFINITY, f64::min);
    let mut probs = vec![0.0; vocab_size];
    let mut total = 0.0;
    for n in neighbors {
        let v = n.value as usize;
        if v >= vocab_size {
            return Err(Error::validation(format!(
                "neighbor value {v} outside vocab of size {vocab_size}"
            )));
        }
        let w = (-(n.distance - d_min) / temperature).exp();
        probs[v] += w;
        total += w;
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(Distribution { probs })
}

/// `λ · p_knn + (1 − λ) · p_nmt`.
pub fn interpolate(
    p_knn: &Distribution,
    p_nmt: &Distribution,
    lambda: f64,
) -> Result<Distribution> {
    if p_knn.len() != p_nmt.len() {
        return Err(Error::validation(format!(
            "distribution lengths differ: {} vs {}",
            p_knn.len(),
            p_nmt.len()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} outside [0, 1]")));
    }
    let probs = p_knn
        .probs
        .iter()
        .zip(&p_nmt.probs)
        .map(|(&k, &n)| lambda * k + (1.0 - lambda) * n)
        .collect();
    Ok(Distribution { probs })
}
