//! Batch-normalized two-layer MLP over the three skip features.
//!
//! Training mode normalizes with batch statistics and updates running
//! statistics with `running = (1 − m)·running + m·batch` (unbiased variance).
//! Inference uses the running statistics only.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::focal::{focal_grad_factor, focal_loss, FocalLossConfig, P_MIN};
use super::{FeatureVector, Label, ThresholdSchedule, TrainingSample};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::metrics::skip_f1;

const F: usize = FeatureVector::LEN;
const CLASSIFIER_MAGIC: &[u8; 4] = b"RGSC";
const CLASSIFIER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub running_mean: [f64; F],
    pub running_var: [f64; F],
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNorm {
    fn default() -> Self {
        Self {
            running_mean: [0.0; F],
            running_var: [1.0; F],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

impl BatchNorm {
    fn normalize(&self, x: &[f64; F]) -> [f64; F] {
        std::array::from_fn(|i| {
            (x[i] - self.running_mean[i]) / (self.running_var[i] + self.eps).sqrt()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipClassifier {
    pub bn: BatchNorm,
    /// F × H
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// H × 2
    pub w2: Matrix,
    pub b2: [f64; 2],
    pub trained: bool,
    /// Features with `false` are replaced by 0 before normalization.
    pub feature_mask: [bool; F],
}

/// Loss being minimized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Focal(FocalLossConfig),
    /// Class-weighted cross-entropy, computed directly.
    WeightedCe {
        alpha: [f64; 2],
    },
}

impl Objective {
    fn loss(&self, p_c: f64, c: Label) -> f64 {
        match self {
            Objective::Focal(cfg) => focal_loss(p_c, cfg, c),
            Objective::WeightedCe { alpha } => -alpha[c as usize] * p_c.max(P_MIN).ln(),
        }
    }

    /// Gradient of the per-sample loss w.r.t. the two logits.
    fn logit_grad(&self, probs: [f64; 2], c: Label) -> [f64; 2] {
        let ci = c as usize;
        match self {
            Objective::Focal(cfg) => {
                let factor = focal_grad_factor(probs[ci], cfg, c);
                std::array::from_fn(|j| factor * ((j == ci) as u8 as f64 - probs[j]))
            }
            Objective::WeightedCe { alpha } => {
                std::array::from_fn(|j| alpha[ci] * (probs[j] - (j == ci) as u8 as f64))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Which of (p_top1, h_norm, max_attn) the classifier may use.
    #[serde(default = "all_features")]
    pub feature_mask: [bool; F],
}

fn all_features() -> [bool; F] {
    [true; F]
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 0.05,
            batch_size: 64,
            hidden: 32,
            seed: 7,
            feature_mask: [true; F],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifierReport {
    pub best_epoch: Option<usize>,
    pub best_heldout_f1: Option<f64>,
    /// Training samples all had one label.
    pub single_class: bool,
    pub epoch_losses: Vec<f64>,
    pub objective: Objective,
}

/// Parameter gradients, plus gradients w.r.t. the raw inputs (through the
/// batch-norm training path).
#[derive(Clone, Debug)]
pub struct ClassifierGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: [f64; 2],
    pub inputs: Vec<[f64; F]>,
}

impl SkipClassifier {
    /// Linear layers drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn init(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (F as f64).sqrt();
        let b_hidden = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::uniform(F, hidden, b_in, &mut rng);
        let b1 = (0..hidden).map(|_| rng.gen_range(-b_in..b_in)).collect();
        let w2 = Matrix::uniform(hidden, 2, b_hidden, &mut rng);
        let b2 = [
            rng.gen_range(-b_hidden..b_hidden),
            rng.gen_range(-b_hidden..b_hidden),
        ];
        Self {
            bn: BatchNorm::default(),
            w1,
            b1,
            w2,
            b2,
            trained: false,
            feature_mask: [true; F],
        }
    }

    /// All weights zero; marked trained so it can be queried.
    pub fn zeros(hidden: usize) -> Self {
        Self {
            bn: BatchNorm::default(),
            w1: Matrix::zeros(F, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, 2),
            b2: [0.0; 2],
            trained: true,
            feature_mask: [true; F],
        }
    }

    /// A classifier whose retrieve probability is ≈ `p` for every input.
    pub fn constant(hidden: usize, p: f64) -> Self {
        let mut c = Self::zeros(hidden);
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        c.b2 = [0.0, (p / (1.0 - p)).ln()];
        c
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn head(&self, xhat: &[f64; F]) -> ([f64; 2], Vec<f64>, Vec<f64>) {
        let mut pre = self.w1.vec_mul(xhat);
        axpy(1.0, &self.b1, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let l = self.w2.vec_mul(&act);
        let logits = [l[0] + self.b2[0], l[1] + self.b2[1]];
        let m = logits[0].max(logits[1]);
        let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
        let s = e[0] + e[1];
        ([e[0] / s, e[1] / s], pre, act)
    }

    fn masked(&self, features: &FeatureVector) -> [f64; F] {
        let x = features.to_array();
        std::array::from_fn(|i| if self.feature_mask[i] { x[i] } else { 0.0 })
    }

    /// `(p_skip, p_conduct)` with running statistics.
    pub fn predict(&self, features: &FeatureVector) -> [f64; 2] {
        self.head(&self.bn.normalize(&self.masked(features))).0
    }

    /// Probability of the *conduct retrieval* class.
    pub fn retrieve_probability(&self, features: &FeatureVector) -> Result<f64> {
        if !self.trained {
            return Err(Error::State("skip classifier has not been trained".into()));
        }
        Ok(self.predict(features)[1])
    }

    /// Batch statistics (mean, biased variance) per feature.
    fn batch_stats(inputs: &[[f64; F]]) -> ([f64; F], [f64; F]) {
        let n = inputs.len() as f64;
        let mean: [f64; F] = std::array::from_fn(|i| inputs.iter().map(|x| x[i]).sum::<f64>() / n);
        let var: [f64; F] = std::array::from_fn(|i| {
            inputs.iter().map(|x| (x[i] - mean[i]).powi(2)).sum::<f64>() / n
        });
        (mean, var)
    }

    /// Mean training-mode loss over a batch and its gradients.
    pub fn loss_and_grads(
        &self,
        inputs: &[[f64; F]],
        labels: &[Label],
        objective: &Objective,
    ) -> Result<(f64, ClassifierGrads)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::validation(
                "batch must be non-empty with one label per input",
            ));
        }
        let h = self.hidden();
        let n = inputs.len() as f64;
        let (mean, var) = Self::batch_stats(inputs);
        let inv_std: [f64; F] = std::array::from_fn(|i| 1.0 / (var[i] + self.bn.eps).sqrt());
        let xhats: Vec<[f64; F]> = inputs
            .iter()
            .map(|x| std::array::from_fn(|i| (x[i] - mean[i]) * inv_std[i]))
            .collect();

        let mut g = ClassifierGrads {
            w1: Matrix::zeros(F, h),
            b1: vec![0.0; h],
            w2: Matrix::zeros(h, 2),
            b2: [0.0; 2],
            inputs: vec![[0.0; F]; inputs.len()],
        };
        let mut dxhat = vec![[0.0; F]; inputs.len()];
        let mut loss = 0.0;
        let mut d_act = vec![0.0; h];
        for (i, (xhat, &c)) in xhats.iter().zip(labels).enumerate() {
            let (probs, pre, act) = self.head(xhat);
            loss += objective.loss(probs[c as usize], c);
            let dl = objective.logit_grad(probs, c).map(|v| v / n);
            g.w2.add_outer(1.0, &act, &dl);
            g.b2[0] += dl[0];
            g.b2[1] += dl[1];
            self.w2.mul_vec_into(&dl, &mut d_act);
            for (da, &z) in d_act.iter_mut().zip(&pre) {
                if z <= 0.0 {
                    *da = 0.0;
                }
            }
            g.w1.add_outer(1.0, xhat, &d_act);
            axpy(1.0, &d_act, &mut g.b1);
            self.w1.mul_vec_into(&d_act, &mut dxhat[i]);
        }

        // Batch-norm backward (no affine parameters).
        for f in 0..F {
            let mean_d: f64 = dxhat.iter().map(|d| d[f]).sum::<f64>() / n;
            let mean_dx: f64 = dxhat
                .iter()
                .zip(&xhats)
                .map(|(d, x)| d[f] * x[f])
                .sum::<f64>()
                / n;
            for i in 0..inputs.len() {
                g.inputs[i][f] = inv_std[f] * (dxhat[i][f] - mean_d - xhats[i][f] * mean_dx);
            }
        }
        Ok((loss / n, g))
    }

    fn update_running(&mut self, inputs: &[[f64; F]]) {
        let (mean, var) = Self::batch_stats(inputs);
        let n = inputs.len();
        let m = self.bn.momentum;
        for i in 0..F {
            let unbiased = if n > 1 {
                var[i] * n as f64 / (n - 1) as f64
            } else {
                var[i]
            };
            self.bn.running_mean[i] = (1.0 - m) * self.bn.running_mean[i] + m * mean[i];
            self.bn.running_var[i] = (1.0 - m) * self.bn.running_var[i] + m * unbiased;
        }
    }

    fn sgd(&mut self, g: &ClassifierGrads, lr: f64) {
        axpy(-lr, &g.w1.data, &mut self.w1.data);
        axpy(-lr, &g.b1, &mut self.b1);
        axpy(-lr, &g.w2.data, &mut self.w2.data);
        self.b2[0] -= lr * g.b2[0];
        self.b2[1] -= lr * g.b2[1];
    }

    fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    /// Conduct-class F1 at the 0.5 decision point (running statistics).
    pub fn f1_on(&self, samples: &[TrainingSample]) -> Option<f64> {
        let pred: Vec<bool> = samples
            .iter()
            .map(|s| self.predict(&s.features)[1] > 0.5)
            .collect();
        let gold: Vec<bool> = samples.iter().map(|s| s.label.is_conduct()).collect();
        skip_f1(&pred, &gold).ok()?.f1
    }
}

pub fn retrieve_probability(clf: &SkipClassifier, features: &FeatureVector) -> Result<f64> {
    clf.retrieve_probability(features)
}

/// Focal objective with inverse-frequency class weights derived from `samples`.
pub fn balanced_focal(samples: &[TrainingSample], gamma: f64) -> FocalLossConfig {
    let conduct = samples.iter().filter(|s| s.label.is_conduct()).count();
    FocalLossConfig::balanced(samples.len() - conduct, conduct, gamma)
}

/// Minibatch SGD; keeps the epoch with the best held-out F1 (first one on
/// ties). Without a usable held-out F1 the final epoch is returned.
pub fn train_classifier(
    train: &[TrainingSample],
    heldout: &[TrainingSample],
    objective: &Objective,
    cfg: &ClassifierTrainConfig,
) -> Result<(SkipClassifier, ClassifierReport)> {
    if train.is_empty() {
        return Err(Error::validation("no training samples"));
    }
    if cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::config(
            "classifier batch_size and hidden must be positive",
        ));
    }
    if let Objective::Focal(f) = objective {
        f.validate()?;
    }
    let conduct = train.iter().filter(|s| s.label.is_conduct()).count();
    let single_class = conduct == 0 || conduct == train.len();
    if single_class {
        log::warn!("classifier training samples contain a single class");
    }

    let mut clf = SkipClassifier::init(cfg.hidden, cfg.seed);
    clf.trained = true;
    clf.feature_mask = cfg.feature_mask;
    let inputs: Vec<[f64; F]> = train.iter().map(|s| clf.masked(&s.features)).collect();
    let labels: Vec<Label> = train.iter().map(|s| s.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, SkipClassifier)> = None;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut bx = Vec::with_capacity(cfg.batch_size);
    let mut by = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            bx.clear();
            by.clear();
            bx.extend(chunk.iter().map(|&i| inputs[i]));
            by.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grads) = clf.loss_and_grads(&bx, &by, objective)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            total += loss * chunk.len() as f64;
            clf.sgd(&grads, cfg.lr);
            clf.update_running(&bx);
        }
        if !clf.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        epoch_losses.push(total / train.len() as f64);
        if let Some(f1) = clf.f1_on(heldout) {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, clf.clone()));
            }
        }
    }

    let (best_f1, best_epoch, chosen) = match best {
        Some((f1, e, c)) => (Some(f1), Some(e), c),
        None => (None, None, clf),
    };
    Ok((
        chosen,
        ClassifierReport {
            best_epoch,
            best_heldout_f1: best_f1,
            single_class,
            epoch_losses,
            objective: *objective,
        },
    ))
}

pub fn classifier_to_bytes(clf: &SkipClassifier, sched: &ThresholdSchedule) -> Vec<u8> {
    let mut w = Writer::header(CLASSIFIER_MAGIC, CLASSIFIER_VERSION);
    w.u32(clf.hidden() as u32);
    w.u32(clf.trained as u32);
    w.u32(
        clf.feature_mask
            .iter()
            .enumerate()
            .map(|(i, &m)| (m as u32) << i)
            .sum(),
    );
    w.f64(clf.bn.momentum);
    w.f64(clf.bn.eps);
    w.f64s(&clf.bn.running_mean);
    w.f64s(&clf.bn.running_var);
    w.f64s(&clf.w1.data);
    w.f64s(&clf.b1);
    w.f64s(&clf.w2.data);
    w.f64s(&clf.b2);
    w.f64(sched.alpha_min);
    w.f64(sched.t_mean);
    w.buf
}

pub fn classifier_from_bytes(bytes: &[u8]) -> Result<(SkipClassifier, ThresholdSchedule)> {
    let mut r = Reader::new(bytes);
    r.magic(CLASSIFIER_MAGIC)?;
    r.version(CLASSIFIER_VERSION)?;
    let hidden = r.u32()? as usize;
    let trained = r.u32()? != 0;
    let mask_bits = r.u32()?;
    let feature_mask = std::array::from_fn(|i| mask_bits & (1 << i) != 0);
    let momentum = r.f64()?;
    let eps = r.f64()?;
    let running_mean = r.f64_vec(F)?.try_into().expect("F values");
    let running_var = r.f64_vec(F)?.try_into().expect("F values");
    let w1 = Matrix {
        rows: F,
        cols: hidden,
        data: r.f64_vec(F * hidden)?,
    };
    let b1 = r.f64_vec(hidden)?;
    let w2 = Matrix {
        rows: hidden,
        cols: 2,
        data: r.f64_vec(hidden * 2)?,
    };
    let b2 = [r.f64()?, r.f64()?];
    let sched = ThresholdSchedule {
        alpha_min: r.f64()?,
        t_mean: r.f64()?,
    };
    r.finish()?;
    Ok((
        SkipClassifier {
            bn: BatchNorm {
                running_mean,
                running_var,
                momentum,
                eps,
            },
            w1,
            b1,
            w2,
            b2,
            trained,
            feature_mask,
        },
        sched,
    ))
}

pub fn save_classifier(clf: &SkipClassifier, sched: &ThresholdSchedule, path: &Path) -> Result<()> {
    std::fs::write(path, classifier_to_bytes(clf, sched)).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path) -> Result<(SkipClassifier, ThresholdSchedule)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    classifier_from_bytes(&bytes)
}
