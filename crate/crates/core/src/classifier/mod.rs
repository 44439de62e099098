//! Lightweight skip classifier and the timestep-aware decision rule.

mod features;
mod focal;
mod network;
mod samples;
mod threshold;

use serde::{Deserialize, Serialize};

pub use features::{extract_features, FeatureVector};
pub use focal::{focal_loss, FocalLossConfig, P_MIN};
pub use network::{
    balanced_focal, classifier_from_bytes, classifier_to_bytes, load_classifier,
    retrieve_probability, save_classifier, train_classifier, BatchNorm, ClassifierGrads,
    ClassifierReport, ClassifierTrainConfig, Objective, SkipClassifier,
};
pub use samples::{
    build_training_samples, conventional_label, criteria_label, load_samples, rank_of,
    save_samples, Label, SampleMeta, TrainingSample,
};
pub use threshold::{threshold_at, ThresholdSchedule};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipDecision {
    pub skip: bool,
    pub p_retrieve: f64,
    pub alpha_t: f64,
}

/// Retrieval runs only when `p_retrieve` strictly exceeds the threshold at `t`.
pub fn dr_skip_decision(
    clf: &SkipClassifier,
    sched: &ThresholdSchedule,
    features: &FeatureVector,
    t: usize,
) -> Result<SkipDecision> {
    let p_retrieve = clf.retrieve_probability(features)?;
    let alpha_t = sched.threshold_at(t);
    Ok(SkipDecision {
        skip: !(p_retrieve > alpha_t),
        p_retrieve,
        alpha_t,
    })
}
