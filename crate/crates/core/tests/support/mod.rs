//! Checks shared by the test targets and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipknn::ar::{LambdaEstimator, LambdaMode, NormStats};
use skipknn::classifier::{
    FeatureVector, FocalLossConfig, Label, Objective, SampleMeta, SkipClassifier, TrainingSample,
};
use skipknn::corpus::{ParallelPair, EOS};
use skipknn::datastore::Datastore;
use skipknn::model::{loss_and_grads, ModelParams};
use skipknn::parallel::Parallelism;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

pub type Check = Result<(), String>;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn random_pairs(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<ParallelPair> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(1..6);
            let source = (0..len).map(|_| rng.gen_range(4..vocab as u32)).collect();
            let mut target: Vec<u32> = (0..rng.gen_range(1..6))
                .map(|_| rng.gen_range(4..vocab as u32))
                .collect();
            target.push(EOS);
            ParallelPair { source, target }
        })
        .collect()
}

/// Base model over `configs` random parameter draws and batches.
pub fn base_model_gradients(configs: u64) -> Check {
    for cfg in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + cfg);
        let vocab = 12 + cfg as usize;
        let mut params = ModelParams::init(vocab, 6 + cfg as usize, 5, cfg).unwrap();
        // Larger weights than the default init so every path carries signal.
        for block in params.blocks_mut() {
            for v in block.iter_mut() {
                *v = rng.gen_range(-0.6..0.6);
            }
        }
        let pairs = random_pairs(&mut rng, vocab, 3);
        let (_, grads) = loss_and_grads(&params, &pairs).unwrap();
        let analytic: Vec<Vec<f64>> = grads.blocks().iter().map(|b| b.to_vec()).collect();
        for (bi, block_grad) in analytic.iter().enumerate() {
            for (i, &a) in block_grad.iter().enumerate() {
                let orig = params.blocks_mut()[bi][i];
                params.blocks_mut()[bi][i] = orig + EPS;
                let (lp, _) = loss_and_grads(&params, &pairs).unwrap();
                params.blocks_mut()[bi][i] = orig - EPS;
                let (lm, _) = loss_and_grads(&params, &pairs).unwrap();
                params.blocks_mut()[bi][i] = orig;
                let numeric = (lp - lm) / (2.0 * EPS);
                if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
                    continue;
                }
                if rel_err(a, numeric) >= REL_TOL {
                    return Err(format!(
                        "config {cfg} block {bi} index {i}: analytic {a} numeric {numeric}"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn random_samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrainingSample> {
    (0..n)
        .map(|i| {
            let conduct = rng.gen_bool(0.4);
            TrainingSample {
                features: FeatureVector {
                    p_top1: rng.gen_range(0.05..1.0),
                    h_norm: rng.gen_range(0.0..12.0),
                    max_attn: rng.gen_range(0.1..1.0),
                },
                label: if conduct { Label::Conduct } else { Label::Skip },
                timestep: rng.gen_range(0..30),
                meta: SampleMeta {
                    pair_id: i,
                    target: 5,
                    nmt_rank: rng.gen_range(1..4),
                    in_neighbors: conduct,
                    p_nmt_target: rng.gen_range(0.01..0.99),
                    p_knn_target: rng.gen_range(0.01..0.99),
                },
            }
        })
        .collect()
}

/// Central differences over every entry reachable through `param`.
fn check_params<M>(
    label: &str,
    model: &mut M,
    count: usize,
    param: impl Fn(&mut M, usize) -> &mut f64,
    loss: impl Fn(&M) -> f64,
    analytic: &[f64],
) -> Check {
    assert_eq!(analytic.len(), count);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *param(model, i);
        *param(model, i) = orig + EPS;
        let lp = loss(model);
        *param(model, i) = orig - EPS;
        let lm = loss(model);
        *param(model, i) = orig;
        let numeric = (lp - lm) / (2.0 * EPS);
        if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            continue;
        }
        if rel_err(a, numeric) >= REL_TOL {
            return Err(format!("{label} index {i}: analytic {a} numeric {numeric}"));
        }
    }
    Ok(())
}

fn lambda_param(est: &mut LambdaEstimator, i: usize) -> &mut f64 {
    let (n1, h) = (est.w1.data.len(), est.b1.len());
    if i < n1 {
        &mut est.w1.data[i]
    } else if i < n1 + h {
        &mut est.b1[i - n1]
    } else if i < n1 + 2 * h {
        &mut est.w2[i - n1 - h]
    } else {
        &mut est.b2
    }
}

/// λ estimator in `mode` over `configs` random draws.
pub fn lambda_gradients(mode: LambdaMode, configs: u64) -> Check {
    for cfg in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + cfg);
        let samples = random_samples(&mut rng, 12 + cfg as usize);
        let features: Vec<FeatureVector> = samples.iter().map(|s| s.features).collect();
        let mut est = LambdaEstimator::init(
            mode,
            4 + cfg as usize,
            NormStats::from_features(features.iter()),
            cfg,
        );
        let batch: Vec<&TrainingSample> = samples.iter().collect();
        let (_, g) = est.loss_and_grads(&batch).unwrap();
        let mut analytic = g.w1.data.clone();
        analytic.extend(&g.b1);
        analytic.extend(&g.w2);
        analytic.push(g.b2);
        let count = analytic.len();
        check_params(
            &format!("{mode:?} config {cfg}"),
            &mut est,
            count,
            lambda_param,
            |e| e.loss_and_grads(&batch).unwrap().0,
            &analytic,
        )?;
    }
    Ok(())
}

fn classifier_param(clf: &mut SkipClassifier, i: usize) -> &mut f64 {
    let (n1, h, n2) = (clf.w1.data.len(), clf.b1.len(), clf.w2.data.len());
    if i < n1 {
        &mut clf.w1.data[i]
    } else if i < n1 + h {
        &mut clf.b1[i - n1]
    } else if i < n1 + h + n2 {
        &mut clf.w2.data[i - n1 - h]
    } else {
        &mut clf.b2[i - n1 - h - n2]
    }
}

/// Skip classifier weights and inputs (batch norm in training mode, focal
/// loss with varying γ) over `configs` random draws.
pub fn classifier_gradients(configs: u64) -> Check {
    for cfg in 0..configs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + cfg);
        let samples = random_samples(&mut rng, 10 + 2 * cfg as usize);
        let inputs: Vec<[f64; 3]> = samples.iter().map(|s| s.features.to_array()).collect();
        let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
        let objective = Objective::Focal(FocalLossConfig {
            alpha: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
            gamma: [0.0, 0.5, 1.0, 2.0, 3.5][cfg as usize % 5],
        });
        let mut clf = SkipClassifier::init(3 + cfg as usize, cfg);
        let (_, g) = clf.loss_and_grads(&inputs, &labels, &objective).unwrap();
        let mut analytic = g.w1.data.clone();
        analytic.extend(&g.b1);
        analytic.extend(&g.w2.data);
        analytic.extend(g.b2);
        let count = analytic.len();
        check_params(
            &format!("classifier config {cfg}"),
            &mut clf,
            count,
            classifier_param,
            |c| c.loss_and_grads(&inputs, &labels, &objective).unwrap().0,
            &analytic,
        )?;

        // Input gradients exercise the batch-norm backward pass.
        let mut x = inputs.clone();
        let flat: Vec<f64> = g.inputs.iter().flatten().copied().collect();
        check_params(
            &format!("classifier inputs config {cfg}"),
            &mut x,
            flat.len(),
            |x, i| &mut x[i / 3][i % 3],
            |x| clf.loss_and_grads(x, &labels, &objective).unwrap().0,
            &flat,
        )?;
    }
    Ok(())
}

/// Full scan, stable sort by (distance, row).
fn brute_knn(keys: &[f32], d: usize, query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = keys
        .chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let dist = row
                .iter()
                .zip(query)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            (i, dist)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Exact search against a full scan on `stores` random stores with up to
/// 5000 rows and 64 dimensions; even-numbered stores are built for ties.
pub fn knn_matches_brute_force(stores: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for store_id in 0..stores {
        let n = rng.gen_range(1..=5000);
        let d = rng.gen_range(1..=64);
        // Even-numbered stores use a coarse grid, so many rows tie exactly
        // and every distance is exact in f64.
        let coarse = store_id % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| -> f32 {
            if coarse {
                rng.gen_range(-2i32..=2) as f32 * 0.5
            } else {
                rng.gen_range(-1.0f32..1.0)
            }
        };
        let mut keys: Vec<f32> = (0..n * d).map(|_| draw(&mut rng)).collect();
        // Duplicate rows guarantee ties even on the fine grid.
        for _ in 0..n / 10 {
            let (src, dst) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let row: Vec<f32> = keys[src * d..(src + 1) * d].to_vec();
            keys[dst * d..(dst + 1) * d].copy_from_slice(&row);
        }
        let values = (0..n).map(|i| 4 + (i % 97) as u32).collect();
        let store = Datastore::from_parts(d, keys.clone(), values).unwrap();
        let queries: Vec<Vec<f32>> = (0..4)
            .map(|q| {
                if q == 0 {
                    store.key(rng.gen_range(0..n)).to_vec()
                } else {
                    (0..d).map(|_| draw(&mut rng)).collect()
                }
            })
            .collect();
        for q in &queries {
            let k = rng.gen_range(1..=16);
            let expected = brute_knn(&keys, d, q, k);
            let got = store.query_knn(q, k).unwrap();
            if got.len() != expected.len() {
                return Err(format!(
                    "store {store_id}: {} results, expected {}",
                    got.len(),
                    expected.len()
                ));
            }
            for (g, (i, dist)) in got.iter().zip(&expected) {
                let tol = if coarse { 0.0 } else { 1e-9 * dist.max(1.0) };
                if g.index != *i || g.value != store.value(*i) || (g.distance - dist).abs() > tol {
                    return Err(format!("store {store_id} n {n} d {d} k {k}: got row {} at {}, expected row {i} at {dist}", g.index, g.distance));
                }
            }
        }
        let refs: Vec<&[f32]> = queries.iter().map(Vec::as_slice).collect();
        for par in [Parallelism::Sequential, Parallelism::Rayon] {
            let batched = store.query_knn_batch(&refs, 8, par).unwrap();
            for (q, b) in queries.iter().zip(&batched) {
                if b != &store.query_knn(q, 8).unwrap() {
                    return Err(format!(
                        "store {store_id}: batched search differs ({par:?})"
                    ));
                }
            }
        }
    }
    Ok(())
}
