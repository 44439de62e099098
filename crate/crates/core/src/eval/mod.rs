//! Scoring, the interval-benefit analysis, the α_min sweep, throughput
//! benchmarks, and report files.

mod bleu;
mod report;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, BleuScore, MAX_ORDER, SMOOTHING};
pub use report::{write_intervals_csv, write_report_csv, write_report_md, ReportExtras};

use crate::classifier::{dr_skip_decision, SkipClassifier, ThresholdSchedule, TrainingSample};
use crate::corpus::{strip_eos, ParallelPair, TokenId};
use crate::datastore::Datastore;
use crate::engine::{BatchRun, DecodeMode, Decoder};
use crate::error::{Error, Result};
use crate::knn::KnnConfig;
pub use crate::metrics::{skip_f1, BinaryScores, Confusion};
use crate::model::ModelParams;
use crate::parallel::{current_workers, Parallelism};

/// Intervals with fewer eligible sentences than this are omitted.
pub const MIN_ELIGIBLE: usize = 20;

/// The pieces every decoding evaluation needs.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub params: &'a ModelParams,
    pub store: &'a Datastore,
    pub knn: &'a KnnConfig,
    pub batch_size: usize,
    pub par: Parallelism,
}

impl EvalContext<'_> {
    pub fn decode(&self, mode: &DecodeMode, pairs: &[ParallelPair]) -> Result<BatchRun> {
        let sources: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.source.clone()).collect();
        Decoder::new(self.params, self.store, self.knn, mode)?.translate_batch(
            &sources,
            self.batch_size,
            self.par,
        )
    }
}

/// BLEU of decoded outputs against the pairs' references (EOS stripped).
pub fn run_bleu(run: &BatchRun, pairs: &[ParallelPair]) -> Result<BleuScore> {
    let hyps: Vec<&[TokenId]> = run.traces.iter().map(|t| strip_eos(&t.output)).collect();
    let refs: Vec<&[TokenId]> = pairs.iter().map(|p| p.reference()).collect();
    bleu(&hyps, &refs)
}

/// Teacher-forced conduct-class F1 of the timestep-aware classifier decision.
pub fn dr_skip_f1(
    clf: &SkipClassifier,
    sched: &ThresholdSchedule,
    samples: &[TrainingSample],
) -> Result<BinaryScores> {
    let pred = samples
        .iter()
        .map(|s| dr_skip_decision(clf, sched, &s.features, s.timestep).map(|d| !d.skip))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<bool> = samples.iter().map(|s| s.label.is_conduct()).collect();
    skip_f1(&pred, &gold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    /// Retrieval runs at timesteps 0..=R.
    pub r: usize,
    pub eligible_count: usize,
    pub bleu: f64,
    /// BLEU of the previous interval (or the base model) on the same subset.
    pub previous_bleu: f64,
    pub delta_bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub step: usize,
    pub rows: Vec<IntervalRow>,
    /// `(R, eligible_count)` for intervals skipped for lack of support.
    pub omitted: Vec<(usize, usize)>,
}

/// For R = step, 2·step, …: on sentences whose reference has at least R
/// tokens, BLEU with retrieval at 0..=R minus BLEU with retrieval at
/// 0..=R−step (the base model for the first interval).
pub fn interval_analysis(
    ctx: &EvalContext,
    pairs: &[ParallelPair],
    step: usize,
) -> Result<IntervalReport> {
    if pairs.is_empty() {
        return Err(Error::validation("interval analysis needs test pairs"));
    }
    if step == 0 {
        return Err(Error::config("interval step must be positive"));
    }
    let max_len = pairs.iter().map(|p| p.reference().len()).max().unwrap_or(0);
    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for r in (step..=max_len).step_by(step) {
        let eligible: Vec<ParallelPair> = pairs
            .iter()
            .filter(|p| p.reference().len() >= r)
            .cloned()
            .collect();
        if eligible.len() < MIN_ELIGIBLE {
            omitted.push((r, eligible.len()));
            continue;
        }
        let previous = if r == step {
            DecodeMode::BaseOnly
        } else {
            DecodeMode::interval(0, r - step)?
        };
        let prev_bleu = run_bleu(&ctx.decode(&previous, &eligible)?, &eligible)?.score;
        let bleu = run_bleu(
            &ctx.decode(&DecodeMode::interval(0, r)?, &eligible)?,
            &eligible,
        )?
        .score;
        rows.push(IntervalRow {
            r,
            eligible_count: eligible.len(),
            bleu,
            previous_bleu: prev_bleu,
            delta_bleu: bleu - prev_bleu,
        });
    }
    Ok(IntervalReport {
        step,
        rows,
        omitted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: String,
    pub batch_size: usize,
    pub alpha_min: Option<f64>,
    /// Median over repetitions of tokens / wall seconds.
    pub tok_per_sec: f64,
    pub retrieval_rate: f64,
    pub bleu: BleuScore,
    pub f1: Option<f64>,
    pub tokens: usize,
    pub retrievals: usize,
    pub repetitions: usize,
    pub workers: usize,
    /// Tokens per second of every timed repetition, in run order.
    pub samples: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One labelled mode in a benchmark.
#[derive(Clone, Debug)]
pub struct BenchMode {
    pub label: String,
    pub mode: DecodeMode,
    pub alpha_min: Option<f64>,
    pub f1: Option<f64>,
}

impl BenchMode {
    pub fn new(mode: DecodeMode) -> Self {
        let alpha_min = match &mode {
            DecodeMode::DrSkip { schedule, .. } => Some(schedule.alpha_min),
            _ => None,
        };
        Self {
            label: mode.name().to_owned(),
            mode,
            alpha_min,
            f1: None,
        }
    }
}

/// Warm-up pass, then `repetitions` timed passes per (mode, batch size).
pub fn benchmark(
    ctx: &EvalContext,
    modes: &[BenchMode],
    batch_sizes: &[usize],
    pairs: &[ParallelPair],
    repetitions: usize,
) -> Result<Vec<BenchResult>> {
    if repetitions < 3 {
        return Err(Error::config("benchmark repetitions must be at least 3"));
    }
    if pairs.is_empty() {
        return Err(Error::validation("benchmark needs test pairs"));
    }
    let mut rows = Vec::with_capacity(modes.len() * batch_sizes.len());
    for m in modes {
        for &bs in batch_sizes {
            let ctx = EvalContext {
                batch_size: bs,
                ..*ctx
            };
            let first = ctx.decode(&m.mode, pairs)?;
            let mut samples = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let run = ctx.decode(&m.mode, pairs)?;
                if run.token_count() != first.token_count() {
                    return Err(Error::State(
                        "token count changed between benchmark repetitions".into(),
                    ));
                }
                samples.push(run.token_count() as f64 / run.total_seconds());
            }
            let tokens = first.token_count();
            let retrievals = first.retrieval_count();
            log::info!(
                "bench {} batch {bs}: {:.1} tok/s",
                m.label,
                median(&samples)
            );
            rows.push(BenchResult {
                mode: m.label.clone(),
                batch_size: bs,
                alpha_min: m.alpha_min,
                tok_per_sec: median(&samples),
                retrieval_rate: retrievals as f64 / tokens.max(1) as f64,
                bleu: run_bleu(&first, pairs)?,
                f1: m.f1,
                tokens,
                retrievals,
                repetitions,
                workers: current_workers(ctx.par),
                samples,
            });
        }
    }
    Ok(rows)
}

/// Decodes `pairs` once per α_min with the classifier and T held fixed.
pub fn alpha_min_sweep(
    ctx: &EvalContext,
    clf: &SkipClassifier,
    t_mean: f64,
    values: &[f64],
    pairs: &[ParallelPair],
) -> Result<Vec<BenchResult>> {
    values
        .iter()
        .map(|&alpha_min| {
            let mode = DecodeMode::DrSkip {
                classifier: clf.clone(),
                schedule: ThresholdSchedule::new(alpha_min, t_mean)?,
            };
            let run = ctx.decode(&mode, pairs)?;
            let tokens = run.token_count();
            Ok(BenchResult {
                mode: mode.name().to_owned(),
                batch_size: ctx.batch_size,
                alpha_min: Some(alpha_min),
                tok_per_sec: tokens as f64 / run.total_seconds(),
                retrieval_rate: run.retrieval_count() as f64 / tokens.max(1) as f64,
                bleu: run_bleu(&run, pairs)?,
                f1: None,
                tokens,
                retrievals: run.retrieval_count(),
                repetitions: 1,
                workers: current_workers(ctx.par),
                samples: vec![tokens as f64 / run.total_seconds()],
            })
        })
        .collect()
}
