//! Adaptive-λ baseline: a small MLP estimates the interpolation weight per
//! step and retrieval is skipped when the estimate falls below a fixed α.
//!
//! Two objectives share the same network and inputs:
//!
//! * `tran`: −ln(λ̂·p_kNN(y) + (1 − λ̂)·p_NMT(y)), the translation loss of
//!   the interpolated distribution;
//! * `bina`: binary cross-entropy of λ̂ against the skip/conduct label.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::classifier::{FeatureVector, TrainingSample, P_MIN};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, Matrix};
use crate::metrics::{skip_f1, BinaryScores};

const F: usize = FeatureVector::LEN;
const ESTIMATOR_MAGIC: &[u8; 4] = b"RGLE";
const ESTIMATOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMode {
    Tran,
    Bina,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArConfig {
    pub alpha: f64,
    pub hidden: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            hidden: 32,
        }
    }
}

impl ArConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "ar alpha {} must be in [0, 1]",
                self.alpha
            )));
        }
        if self.hidden == 0 {
            return Err(Error::config("ar hidden size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LambdaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            seed: 7,
        }
    }
}

/// Per-feature standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; F],
    pub var: [f64; F],
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            mean: [0.0; F],
            var: [1.0; F],
        }
    }
}

impl NormStats {
    pub fn from_features<'a>(features: impl Iterator<Item = &'a FeatureVector> + Clone) -> Self {
        let n = features.clone().count().max(1) as f64;
        let mean: [f64; F] =
            std::array::from_fn(|i| features.clone().map(|f| f.to_array()[i]).sum::<f64>() / n);
        let var = std::array::from_fn(|i| {
            features
                .clone()
                .map(|f| (f.to_array()[i] - mean[i]).powi(2))
                .sum::<f64>()
                / n
        });
        Self { mean, var }
    }

    fn apply(&self, f: &FeatureVector) -> [f64; F] {
        let x = f.to_array();
        std::array::from_fn(|i| (x[i] - self.mean[i]) / (self.var[i] + 1e-5).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaEstimator {
    pub mode: LambdaMode,
    pub norm: NormStats,
    /// F × H
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl LambdaEstimator {
    pub fn init(mode: LambdaMode, hidden: usize, norm: NormStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b_in = 1.0 / (F as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        let w1 = Matrix::uniform(F, hidden, b_in, &mut rng);
        let b1 = (0..hidden).map(|_| rng.gen_range(-b_in..b_in)).collect();
        let w2 = (0..hidden).map(|_| rng.gen_range(-b_h..b_h)).collect();
        let b2 = rng.gen_range(-b_h..b_h);
        Self {
            mode,
            norm,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// An estimator that outputs `lambda` for every input.
    pub fn constant(mode: LambdaMode, hidden: usize, lambda: f64) -> Self {
        Self {
            mode,
            norm: NormStats::default(),
            w1: Matrix::zeros(F, hidden),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: (lambda / (1.0 - lambda)).ln(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn forward(&self, x: &[f64; F]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut pre = self.w1.vec_mul(x);
        axpy(1.0, &self.b1, &mut pre);
        let act: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let lambda = sigmoid(dot(&self.w2, &act) + self.b2);
        (lambda, pre, act)
    }

    /// λ̂ ∈ (0, 1).
    pub fn lambda(&self, features: &FeatureVector) -> f64 {
        self.forward(&self.norm.apply(features)).0
    }

    /// Mean loss over `samples` under this estimator's mode, and its gradient.
    pub fn loss_and_grads(&self, samples: &[&TrainingSample]) -> Result<(f64, LambdaGrads)> {
        if samples.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let h = self.hidden();
        let n = samples.len() as f64;
        let mut g = LambdaGrads {
            w1: Matrix::zeros(F, h),
            b1: vec![0.0; h],
            w2: vec![0.0; h],
            b2: 0.0,
        };
        let mut loss = 0.0;
        let mut d_act = vec![0.0; h];
        for s in samples {
            let x = self.norm.apply(&s.features);
            let (lam, pre, act) = self.forward(&x);
            let (l, dz) = match self.mode {
                LambdaMode::Tran => {
                    let (pk, pn) = (s.meta.p_knn_target, s.meta.p_nmt_target);
                    let mix = lam * pk + (1.0 - lam) * pn;
                    if mix > P_MIN {
                        (-mix.ln(), -(pk - pn) / mix * lam * (1.0 - lam))
                    } else {
                        (-P_MIN.ln(), 0.0)
                    }
                }
                LambdaMode::Bina => {
                    let y = s.label.is_conduct() as u8 as f64;
                    let l = -(y * lam.max(P_MIN).ln() + (1.0 - y) * (1.0 - lam).max(P_MIN).ln());
                    (l, lam - y)
                }
            };
            loss += l;
            let dz = dz / n;
            axpy(dz, &act, &mut g.w2);
            g.b2 += dz;
            for ((da, &w), &z) in d_act.iter_mut().zip(&self.w2).zip(&pre) {
                *da = if z > 0.0 { dz * w } else { 0.0 };
            }
            g.w1.add_outer(1.0, &x, &d_act);
            axpy(1.0, &d_act, &mut g.b1);
        }
        Ok((loss / n, g))
    }

    fn sgd(&mut self, g: &LambdaGrads, lr: f64) {
        axpy(-lr, &g.w1.data, &mut self.w1.data);
        axpy(-lr, &g.b1, &mut self.b1);
        axpy(-lr, &g.w2, &mut self.w2);
        self.b2 -= lr * g.b2;
    }

    fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.b1.iter().chain(&self.w2).all(|v| v.is_finite())
            && self.b2.is_finite()
    }
}

/// Trains a λ estimator on `samples` with minibatch SGD. Features are
/// standardized with statistics of the training samples.
pub fn train_lambda(
    mode: LambdaMode,
    samples: &[TrainingSample],
    ar: &ArConfig,
    cfg: &LambdaTrainConfig,
) -> Result<LambdaEstimator> {
    if samples.is_empty() {
        return Err(Error::validation("no samples to train the λ estimator"));
    }
    ar.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("λ estimator batch_size must be positive"));
    }
    let norm = NormStats::from_features(samples.iter().map(|s| &s.features));
    let mut est = LambdaEstimator::init(mode, ar.hidden, norm, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &samples[i]));
            let (loss, g) = est.loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            est.sgd(&g, cfg.lr);
        }
        if !est.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
    }
    Ok(est)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArDecision {
    pub skip: bool,
    pub lambda_hat: f64,
}

pub fn ar_skip_decision(est: &LambdaEstimator, features: &FeatureVector, alpha: f64) -> ArDecision {
    let lambda_hat = est.lambda(features);
    ArDecision {
        skip: lambda_hat < alpha,
        lambda_hat,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    pub mean_abs_diff: f64,
    pub frac_gt_02: f64,
    pub count: usize,
}

/// How far the two objectives' λ̂ drift apart over a feature stream.
pub fn lambda_divergence_stats(
    tran: &LambdaEstimator,
    bina: &LambdaEstimator,
    stream: &[FeatureVector],
) -> Result<DivergenceStats> {
    if stream.is_empty() {
        return Err(Error::validation("empty evaluation stream"));
    }
    let mut sum = 0.0;
    let mut over = 0usize;
    for f in stream {
        let diff = (bina.lambda(f) - tran.lambda(f)).abs();
        sum += diff;
        over += (diff > 0.2) as usize;
    }
    Ok(DivergenceStats {
        mean_abs_diff: sum / stream.len() as f64,
        frac_gt_02: over as f64 / stream.len() as f64,
        count: stream.len(),
    })
}

/// Conduct-class F1 with λ̂ ≥ α counted as a conduct decision.
pub fn ar_skip_f1(
    est: &LambdaEstimator,
    alpha: f64,
    stream: &[TrainingSample],
) -> Result<BinaryScores> {
    let pred: Vec<bool> = stream
        .iter()
        .map(|s| !ar_skip_decision(est, &s.features, alpha).skip)
        .collect();
    let gold: Vec<bool> = stream.iter().map(|s| s.label.is_conduct()).collect();
    skip_f1(&pred, &gold)
}

pub fn estimator_to_bytes(est: &LambdaEstimator) -> Vec<u8> {
    let mut w = Writer::header(ESTIMATOR_MAGIC, ESTIMATOR_VERSION);
    w.u32(match est.mode {
        LambdaMode::Tran => 0,
        LambdaMode::Bina => 1,
    });
    w.u32(F as u32);
    w.u32(est.hidden() as u32);
    w.f64s(&est.norm.mean);
    w.f64s(&est.norm.var);
    w.f64s(&est.w1.data);
    w.f64s(&est.b1);
    w.f64s(&est.w2);
    w.f64(est.b2);
    w.buf
}

pub fn estimator_from_bytes(bytes: &[u8]) -> Result<LambdaEstimator> {
    let mut r = Reader::new(bytes);
    r.magic(ESTIMATOR_MAGIC)?;
    r.version(ESTIMATOR_VERSION)?;
    let mode = match r.u32()? {
        0 => LambdaMode::Tran,
        1 => LambdaMode::Bina,
        other => {
            return Err(Error::Format {
                offset: 8,
                msg: format!("unknown λ mode {other}"),
            })
        }
    };
    let f = r.u32()? as usize;
    if f != F {
        return Err(Error::Format {
            offset: 12,
            msg: format!("expected {F} features, found {f}"),
        });
    }
    let hidden = r.u32()? as usize;
    let mean = r.f64_vec(F)?.try_into().expect("F values");
    let var = r.f64_vec(F)?.try_into().expect("F values");
    let w1 = Matrix {
        rows: F,
        cols: hidden,
        data: r.f64_vec(F * hidden)?,
    };
    let b1 = r.f64_vec(hidden)?;
    let w2 = r.f64_vec(hidden)?;
    let b2 = r.f64()?;
    r.finish()?;
    Ok(LambdaEstimator {
        mode,
        norm: NormStats { mean, var },
        w1,
        b1,
        w2,
        b2,
    })
}

pub fn save_estimator(est: &LambdaEstimator, path: &Path) -> Result<()> {
    std::fs::write(path, estimator_to_bytes(est)).map_err(|e| Error::io(path, e))
}

pub fn load_estimator(path: &Path) -> Result<LambdaEstimator> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    estimator_from_bytes(&bytes)
}
