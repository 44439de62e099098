//! Criteria-labelled training samples, one per teacher-forced timestep.
//!
//! A step is labelled *conduct* only when the gold token is not the base
//! model's top-1 prediction and does appear among the retrieved neighbors.
//! Every other step is labelled *skip*: retrieval cannot help when the model
//! is already right, nor when the neighbors do not contain the answer.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{extract_features, FeatureVector};
use crate::corpus::{ParallelPair, TokenId};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::knn::{knn_distribution, KnnConfig};
use crate::model::{teacher_force_pass, ModelParams};
use crate::parallel::{map_ordered, Parallelism};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Skip = 0,
    Conduct = 1,
}

impl Label {
    pub fn is_conduct(self) -> bool {
        self == Label::Conduct
    }
}

/// Everything needed to re-derive a sample's label without the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub pair_id: usize,
    pub target: TokenId,
    /// 1-based rank of the gold token under the base model; ties go to the
    /// lower token id.
    pub nmt_rank: usize,
    pub in_neighbors: bool,
    pub p_nmt_target: f64,
    pub p_knn_target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: FeatureVector,
    pub label: Label,
    pub timestep: usize,
    pub meta: SampleMeta,
}

/// The skip/conduct criteria used for training.
pub fn criteria_label(meta: &SampleMeta) -> Label {
    if meta.nmt_rank != 1 && meta.in_neighbors {
        Label::Conduct
    } else {
        Label::Skip
    }
}

/// The older criterion: conduct whenever p_kNN(y) ≥ p_NMT(y).
pub fn conventional_label(meta: &SampleMeta) -> Label {
    if meta.p_knn_target >= meta.p_nmt_target {
        Label::Conduct
    } else {
        Label::Skip
    }
}

pub fn rank_of(dist: &[f64], token: TokenId) -> usize {
    let y = token as usize;
    let py = dist[y];
    1 + dist
        .iter()
        .enumerate()
        .filter(|&(v, &p)| p > py || (p == py && v < y))
        .count()
}

/// Teacher-forces `pairs` and labels every step. `first_pair_id` offsets the
/// stored pair ids so that samples from a sub-slice keep corpus-wide ids.
pub fn build_training_samples(
    params: &ModelParams,
    store: &Datastore,
    pairs: &[ParallelPair],
    first_pair_id: usize,
    knn: &KnnConfig,
    par: Parallelism,
) -> Result<Vec<TrainingSample>> {
    if pairs.is_empty() {
        return Err(Error::validation("no pairs to build samples from"));
    }
    knn.validate()?;
    store.check_model(params)?;
    let per_pair = map_ordered(pairs, par, |i, pair| -> Result<Vec<TrainingSample>> {
        let steps = teacher_force_pass(params, pair)?;
        let mut out = Vec::with_capacity(steps.len());
        for (t, (step, &y)) in steps.iter().zip(&pair.target).enumerate() {
            let query: Vec<f32> = step.hidden.iter().map(|&h| h as f32).collect();
            let neighbors = store.query_knn(&query, knn.k)?;
            let in_neighbors = neighbors.iter().any(|n| n.value == y);
            let p_knn_target = if neighbors.is_empty() {
                0.0
            } else {
                knn_distribution(&neighbors, knn.temperature, params.vocab_size)?.probs[y as usize]
            };
            let meta = SampleMeta {
                pair_id: first_pair_id + i,
                target: y,
                nmt_rank: rank_of(&step.dist, y),
                in_neighbors,
                p_nmt_target: step.dist[y as usize],
                p_knn_target,
            };
            out.push(TrainingSample {
                features: extract_features(step),
                label: criteria_label(&meta),
                timestep: t,
                meta,
            });
        }
        Ok(out)
    });
    let mut samples = Vec::new();
    for chunk in per_pair {
        samples.extend(chunk?);
    }
    Ok(samples)
}

/// JSON lines, one sample per line.
pub fn save_samples(samples: &[TrainingSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_samples(path: &Path) -> Result<Vec<TrainingSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(rank: usize, in_neighbors: bool) -> SampleMeta {
        SampleMeta {
            pair_id: 0,
            target: 5,
            nmt_rank: rank,
            in_neighbors,
            p_nmt_target: 0.1,
            p_knn_target: 0.2,
        }
    }

    #[test]
    fn criteria_table() {
        assert_eq!(criteria_label(&meta(1, true)), Label::Skip);
        assert_eq!(criteria_label(&meta(1, false)), Label::Skip);
        assert_eq!(criteria_label(&meta(2, true)), Label::Conduct);
        assert_eq!(criteria_label(&meta(3, false)), Label::Skip);
        assert_eq!(conventional_label(&meta(1, true)), Label::Conduct);
    }

    #[test]
    fn rank_breaks_ties_by_lower_id() {
        let dist = [0.1, 0.4, 0.4, 0.1];
        assert_eq!(rank_of(&dist, 1), 1);
        assert_eq!(rank_of(&dist, 2), 2);
        assert_eq!(rank_of(&dist, 0), 3);
        assert_eq!(rank_of(&dist, 3), 4);
    }

    #[test]
    fn samples_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = TrainingSample {
            features: FeatureVector {
                p_top1: 0.3,
                h_norm: 2.5,
                max_attn: 0.9,
            },
            label: Label::Conduct,
            timestep: 4,
            meta: meta(2, true),
        };
        let path = dir.path().join("s.jsonl");
        save_samples(&[s, s], &path).unwrap();
        assert_eq!(load_samples(&path).unwrap(), vec![s, s]);
    }
}
