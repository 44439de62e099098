//! Greedy decoding with a pluggable retrieval policy.
//!
//! Sentences in a batch advance in lockstep: every active sentence takes its
//! decoder step, the policy decides which of them retrieve, and all retrieval
//! queries of that step go to the datastore as one batched scan. A single
//! sentence is a batch of one, so batching never changes outputs.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ar::{ar_skip_decision, ArConfig, LambdaEstimator};
use crate::classifier::{dr_skip_decision, extract_features, SkipClassifier, ThresholdSchedule};
use crate::corpus::{TokenId, BOS, EOS};
use crate::datastore::{Datastore, Neighbor};
use crate::error::{Error, Result};
use crate::knn::{interpolate, knn_distribution, Distribution, KnnConfig};
use crate::linalg::argmax;
use crate::model::{DecoderStepOutput, EncodedSource, ModelParams};
use crate::parallel::{map_ordered, Parallelism};

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeMode {
    BaseOnly,
    VanillaKnn,
    ArSkip {
        config: ArConfig,
        estimator: LambdaEstimator,
    },
    DrSkip {
        classifier: SkipClassifier,
        schedule: ThresholdSchedule,
    },
    /// Retrieve only at timesteps `lo..=hi`.
    Interval {
        lo: usize,
        hi: usize,
    },
}

impl DecodeMode {
    pub fn interval(lo: usize, hi: usize) -> Result<Self> {
        let mode = DecodeMode::Interval { lo, hi };
        mode.validate()?;
        Ok(mode)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecodeMode::Interval { lo, hi } if lo > hi => {
                Err(Error::validation(format!("interval [{lo}, {hi}] is empty")))
            }
            DecodeMode::ArSkip { config, .. } => config.validate(),
            DecodeMode::DrSkip { schedule, .. } => schedule.validate(),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::BaseOnly => "base_only",
            DecodeMode::VanillaKnn => "vanilla_knn",
            DecodeMode::ArSkip { .. } => "ar_skip",
            DecodeMode::DrSkip { .. } => "dr_skip",
            DecodeMode::Interval { .. } => "interval",
        }
    }

    pub fn uses_retrieval(&self) -> bool {
        !matches!(self, DecodeMode::BaseOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub token: TokenId,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_retrieve: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha_t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Generated tokens, including the final EOS when one was produced.
    pub output: Vec<TokenId>,
    pub per_step: Vec<StepRecord>,
    pub retrieval_count: usize,
    /// Seconds. Inside a batch this is the batch wall time split evenly.
    pub elapsed: f64,
    pub token_count: usize,
}

/// Shared, read-only decoding context.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub params: &'a ModelParams,
    pub store: &'a Datastore,
    pub knn: &'a KnnConfig,
    pub mode: &'a DecodeMode,
}

struct Plan {
    retrieve: bool,
    lambda: f64,
    p_retrieve: Option<f64>,
    lambda_hat: Option<f64>,
    alpha_t: Option<f64>,
}

struct Active {
    enc: EncodedSource,
    max_len: usize,
    last: TokenId,
    trace: DecodeTrace,
    done: bool,
}

impl<'a> Decoder<'a> {
    pub fn new(
        params: &'a ModelParams,
        store: &'a Datastore,
        knn: &'a KnnConfig,
        mode: &'a DecodeMode,
    ) -> Result<Self> {
        knn.validate()?;
        mode.validate()?;
        store.check_model(params)?;
        Ok(Self {
            params,
            store,
            knn,
            mode,
        })
    }

    fn plan(&self, step: &DecoderStepOutput, t: usize) -> Result<Plan> {
        let fixed = |retrieve| Plan {
            retrieve,
            lambda: self.knn.lambda,
            p_retrieve: None,
            lambda_hat: None,
            alpha_t: None,
        };
        Ok(match self.mode {
            DecodeMode::BaseOnly => fixed(false),
            DecodeMode::VanillaKnn => fixed(true),
            DecodeMode::Interval { lo, hi } => fixed(*lo <= t && t <= *hi),
            DecodeMode::ArSkip { config, estimator } => {
                let d = ar_skip_decision(estimator, &extract_features(step), config.alpha);
                Plan {
                    retrieve: !d.skip,
                    lambda: d.lambda_hat,
                    p_retrieve: None,
                    lambda_hat: Some(d.lambda_hat),
                    alpha_t: None,
                }
            }
            DecodeMode::DrSkip {
                classifier,
                schedule,
            } => {
                let d = dr_skip_decision(classifier, schedule, &extract_features(step), t)?;
                Plan {
                    retrieve: !d.skip,
                    lambda: self.knn.lambda,
                    p_retrieve: Some(d.p_retrieve),
                    lambda_hat: None,
                    alpha_t: Some(d.alpha_t),
                }
            }
        })
    }

    /// Final token for one step. An empty neighbor list falls back to p_NMT.
    fn choose(
        &self,
        step: DecoderStepOutput,
        neighbors: Option<&[Neighbor]>,
        lambda: f64,
    ) -> Result<(TokenId, bool)> {
        match neighbors {
            Some(n) if !n.is_empty() => {
                let p_knn = knn_distribution(n, self.knn.temperature, self.params.vocab_size)?;
                let p = interpolate(&p_knn, &Distribution { probs: step.dist }, lambda)?;
                Ok((p.argmax() as TokenId, false))
            }
            _ => Ok((argmax(&step.dist) as TokenId, true)),
        }
    }

    pub fn translate(&self, source: &[TokenId]) -> Result<DecodeTrace> {
        let start = Instant::now();
        let mut traces = self.decode_group(
            std::slice::from_ref(&source.to_vec()),
            Parallelism::Sequential,
        )?;
        let mut trace = traces.pop().expect("one trace per source");
        trace.elapsed = start.elapsed().as_secs_f64();
        Ok(trace)
    }

    /// Lockstep greedy decoding of one group of sentences.
    fn decode_group(&self, sources: &[Vec<TokenId>], par: Parallelism) -> Result<Vec<DecodeTrace>> {
        let mut active = sources
            .iter()
            .map(|s| {
                Ok(Active {
                    enc: self.params.encode_source(s)?,
                    max_len: 2 * s.len() + 10,
                    last: BOS,
                    trace: DecodeTrace {
                        output: Vec::new(),
                        per_step: Vec::new(),
                        retrieval_count: 0,
                        elapsed: 0.0,
                        token_count: 0,
                    },
                    done: false,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut t = 0;
        loop {
            let live: Vec<usize> = (0..active.len()).filter(|&i| !active[i].done).collect();
            if live.is_empty() {
                break;
            }
            let steps = map_ordered(&live, par, |_, &i| {
                let a = &active[i];
                self.params.step(&a.enc, a.last, t)
            });
            let plans = steps
                .iter()
                .map(|s| self.plan(s, t))
                .collect::<Result<Vec<_>>>()?;
            let queries: Vec<Vec<f32>> = steps
                .iter()
                .zip(&plans)
                .filter(|(_, p)| p.retrieve)
                .map(|(s, _)| s.hidden.iter().map(|&h| h as f32).collect())
                .collect();
            let refs: Vec<&[f32]> = queries.iter().map(|q| q.as_slice()).collect();
            let mut neighbors = self
                .store
                .query_knn_batch(&refs, self.knn.k, par)?
                .into_iter();

            for ((&i, step), plan) in live.iter().zip(steps).zip(plans) {
                let found = if plan.retrieve {
                    neighbors.next()
                } else {
                    None
                };
                let (token, skipped) = self.choose(step, found.as_deref(), plan.lambda)?;
                let a = &mut active[i];
                a.trace.per_step.push(StepRecord {
                    t,
                    token,
                    skipped,
                    p_retrieve: plan.p_retrieve,
                    lambda_hat: plan.lambda_hat,
                    alpha_t: plan.alpha_t,
                });
                a.trace.retrieval_count += !skipped as usize;
                a.trace.output.push(token);
                a.last = token;
                if token == EOS || a.trace.output.len() >= a.max_len {
                    a.done = true;
                }
            }
            t += 1;
        }
        Ok(active
            .into_iter()
            .map(|mut a| {
                a.trace.token_count = a.trace.output.len();
                a.trace
            })
            .collect())
    }

    /// Decodes `sources` in groups of `batch_size`, recording each group's
    /// wall time. Outputs equal per-sentence [`Decoder::translate`].
    pub fn translate_batch(
        &self,
        sources: &[Vec<TokenId>],
        batch_size: usize,
        par: Parallelism,
    ) -> Result<BatchRun> {
        if batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        let mut traces = Vec::with_capacity(sources.len());
        let mut batch_seconds = Vec::new();
        for group in sources.chunks(batch_size) {
            let start = Instant::now();
            let mut out = self.decode_group(group, par)?;
            let secs = start.elapsed().as_secs_f64();
            for tr in &mut out {
                tr.elapsed = secs / group.len() as f64;
            }
            batch_seconds.push(secs);
            traces.extend(out);
        }
        Ok(BatchRun {
            traces,
            batch_seconds,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRun {
    pub traces: Vec<DecodeTrace>,
    pub batch_seconds: Vec<f64>,
}

impl BatchRun {
    pub fn total_seconds(&self) -> f64 {
        self.batch_seconds.iter().sum()
    }

    pub fn token_count(&self) -> usize {
        self.traces.iter().map(|t| t.token_count).sum()
    }

    pub fn retrieval_count(&self) -> usize {
        self.traces.iter().map(|t| t.retrieval_count).sum()
    }
}

pub fn translate(
    params: &ModelParams,
    store: &Datastore,
    knn: &KnnConfig,
    mode: &DecodeMode,
    source: &[TokenId],
) -> Result<DecodeTrace> {
    Decoder::new(params, store, knn, mode)?.translate(source)
}

pub fn translate_batch(
    params: &ModelParams,
    store: &Datastore,
    knn: &KnnConfig,
    mode: &DecodeMode,
    sources: &[Vec<TokenId>],
    batch_size: usize,
    par: Parallelism,
) -> Result<BatchRun> {
    Decoder::new(params, store, knn, mode)?.translate_batch(sources, batch_size, par)
}

/// One JSON object per trace per line.
pub fn save_traces(traces: &[DecodeTrace], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_traces(path: &Path) -> Result<Vec<DecodeTrace>> {
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
    use crate::corpus::ParallelPair;
    use crate::datastore::build_datastore;

    fn setup() -> (ModelParams, Datastore, Vec<Vec<TokenId>>) {
        let params = ModelParams::init(30, 8, 8, 3).unwrap();
        let pairs: Vec<ParallelPair> = (0..20u32)
            .map(|i| ParallelPair {
                source: vec![4 + i % 7, 5 + i % 11, 6],
                target: vec![10 + i % 13, 9, EOS],
            })
            .collect();
        let store = build_datastore(&params, &pairs).unwrap();
        let sources = pairs.iter().map(|p| p.source.clone()).collect();
        (params, store, sources)
    }

    #[test]
    fn interval_bounds_are_checked() {
        assert!(DecodeMode::interval(1, 0).is_err());
        assert!(DecodeMode::interval(0, 0).is_ok());
    }

    #[test]
    fn degenerate_policies_match_fixed_modes() {
        let (params, store, sources) = setup();
        let knn = KnnConfig::default();
        let sched = ThresholdSchedule::new(0.4, 5.0).unwrap();
        let all_skip = DecodeMode::DrSkip {
            classifier: SkipClassifier::constant(4, 0.0),
            schedule: sched,
        };
        let all_conduct = DecodeMode::DrSkip {
            classifier: SkipClassifier::constant(4, 1.0),
            schedule: sched,
        };
        let unbounded = DecodeMode::interval(0, usize::MAX).unwrap();
        for s in &sources {
            let out = |m: &DecodeMode| translate(&params, &store, &knn, m, s).unwrap();
            let base = out(&DecodeMode::BaseOnly);
            let vanilla = out(&DecodeMode::VanillaKnn);
            assert_eq!(out(&all_skip).output, base.output);
            assert_eq!(out(&all_skip).retrieval_count, 0);
            assert_eq!(out(&all_conduct).output, vanilla.output);
            assert_eq!(out(&unbounded).output, vanilla.output);
            assert_eq!(vanilla.retrieval_count, vanilla.token_count);
            assert!(vanilla.token_count <= 2 * s.len() + 10);
        }
    }

    #[test]
    fn batching_is_transparent() {
        let (params, store, sources) = setup();
        let knn = KnnConfig::default();
        let mode = DecodeMode::interval(1, 3).unwrap();
        let single: Vec<_> = sources
            .iter()
            .map(|s| translate(&params, &store, &knn, &mode, s).unwrap())
            .collect();
        for bs in [1, 3, 7, 64] {
            for par in [Parallelism::Sequential, Parallelism::Rayon] {
                let run = translate_batch(&params, &store, &knn, &mode, &sources, bs, par).unwrap();
                assert_eq!(run.batch_seconds.len(), sources.len().div_ceil(bs));
                for (a, b) in single.iter().zip(&run.traces) {
                    assert_eq!(a.output, b.output);
                    assert_eq!(a.per_step, b.per_step);
                }
            }
        }
        assert!(translate_batch(
            &params,
            &store,
            &knn,
            &mode,
            &sources,
            0,
            Parallelism::Sequential
        )
        .is_err());
    }

    #[test]
    fn empty_store_counts_as_skipped() {
        let (params, _, sources) = setup();
        let empty = Datastore::from_parts(8, vec![], vec![]).unwrap();
        let knn = KnnConfig::default();
        let base = translate(&params, &empty, &knn, &DecodeMode::BaseOnly, &sources[0]).unwrap();
        let tr = translate(&params, &empty, &knn, &DecodeMode::VanillaKnn, &sources[0]).unwrap();
        assert_eq!(tr.retrieval_count, 0);
        assert_eq!(tr.output, base.output);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (params, _, sources) = setup();
        let other = Datastore::from_parts(5, vec![0.0; 5], vec![4]).unwrap();
        let err = translate(
            &params,
            &other,
            &KnnConfig::default(),
            &DecodeMode::VanillaKnn,
            &sources[0],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn traces_round_trip() {
        let (params, store, sources) = setup();
        let mode = DecodeMode::DrSkip {
            classifier: SkipClassifier::constant(4, 0.7),
            schedule: ThresholdSchedule::new(0.4, 5.0).unwrap(),
        };
        let traces: Vec<_> = sources[..3]
            .iter()
            .map(|s| translate(&params, &store, &KnnConfig::default(), &mode, s).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        save_traces(&traces, &path).unwrap();
        assert_eq!(load_traces(&path).unwrap(), traces);
    }
}
