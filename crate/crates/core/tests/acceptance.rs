//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Builds the reference setup (default configuration, fixed seeds) under the
//! cargo target directory, then checks every criterion against it. Exits
//! non-zero if any criterion fails.

mod support;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipknn::ar::{ar_skip_f1, lambda_divergence_stats, load_estimator, LambdaMode};
use skipknn::classifier::{
    classifier_from_bytes, classifier_to_bytes, focal_loss, FocalLossConfig, Label, SkipClassifier,
    ThresholdSchedule, TrainingSample,
};
use skipknn::corpus::{corpus_to_string, CorpusSplit};
use skipknn::datastore::{store_file_size, store_from_bytes, store_to_bytes, Datastore};
use skipknn::engine::DecodeMode;
use skipknn::eval::{dr_skip_f1, BenchResult, EvalContext};
use skipknn::linalg::argmax;
use skipknn::model::{model_from_bytes, model_to_bytes, teacher_force_pass, ModelParams};
use skipknn::pipeline::{self, ModeName, Paths, PipelineConfig, SampleSets};

const FORMULA_TOL: f64 = 1e-12;
const FOCAL_HAND_TOL: f64 = 1e-9;
const FOCAL_HAND_VALUE: f64 = 0.1733;
const FOCAL_HAND_ROUNDING: f64 = 5e-5;
const MIN_BLEU_GAIN: f64 = 5.0;
const MIN_GAIN_RETAINED: f64 = 0.90;
const MAX_RETRIEVAL_SHARE: f64 = 0.60;
const BENCH_BATCH: usize = 128;
const BENCH_REPETITIONS: usize = 5;
const DEGENERACY_SENTENCES: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

struct Reference {
    cfg: PipelineConfig,
    params: ModelParams,
    store: Datastore,
    domain: CorpusSplit,
    sets: SampleSets,
    clf: SkipClassifier,
    sched: ThresholdSchedule,
    setup: Duration,
    bench: Vec<BenchResult>,
    bench_time: Duration,
    sweep: Vec<BenchResult>,
    sweep_time: Duration,
}

fn reference_config(root: PathBuf) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        paths: Paths::under(&root),
        ..PipelineConfig::default()
    };
    cfg.bench.batch_sizes = vec![BENCH_BATCH];
    cfg.bench.repetitions = BENCH_REPETITIONS;
    cfg.bench.modes = vec![ModeName::BaseOnly, ModeName::VanillaKnn, ModeName::DrSkip];
    cfg
}

fn build_reference() -> skipknn::Result<Reference> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| skipknn::Error::Io {
            path: root.clone(),
            source: e,
        })?;
    }
    let cfg = reference_config(root);
    let start = Instant::now();
    pipeline::gen_corpus(&cfg)?;
    pipeline::train_base_stage(&cfg)?;
    pipeline::build_store_stage(&cfg)?;
    pipeline::build_samples_stage(&cfg)?;
    let (clf, sched, _) = pipeline::train_classifier_stage(&cfg)?;
    pipeline::train_ar_stage(&cfg)?;
    let setup = start.elapsed();

    let start = Instant::now();
    let bench = pipeline::bench_stage(&cfg)?.rows;
    let bench_time = start.elapsed();
    let start = Instant::now();
    let sweep = pipeline::sweep_alpha_stage(&cfg)?;
    let sweep_time = start.elapsed();

    Ok(Reference {
        params: pipeline::load_base(&cfg)?,
        store: pipeline::load_domain_store(&cfg)?,
        domain: pipeline::load_domain(&cfg)?,
        sets: pipeline::load_sample_sets(&cfg)?,
        cfg,
        clf,
        sched,
        setup,
        bench,
        bench_time,
        sweep,
        sweep_time,
    })
}

fn threshold_formula() -> Outcome {
    let mut worst: f64 = 0.0;
    for alpha_min in [0.35, 0.40, 0.45, 0.5] {
        for t_mean in [10.0, 20.0] {
            let s = ThresholdSchedule::new(alpha_min, t_mean).unwrap();
            for t in 0..=40usize {
                let c = (t as f64 / t_mean).min(1.0);
                let want = alpha_min + c * c * (0.5 - alpha_min);
                worst = worst.max((s.threshold_at(t) - want).abs());
            }
        }
    }
    let s = ThresholdSchedule::new(0.4, 20.0).unwrap();
    let spot = (s.threshold_at(10) - 0.425).abs() <= FORMULA_TOL
        && s.threshold_at(20) == 0.5
        && s.threshold_at(27) == 0.5;
    Outcome::new(
        worst <= FORMULA_TOL && spot,
        format!(
            "max |error| {worst:.1e} over 328 grid points; (0.4, 20, 10) -> {}",
            s.threshold_at(10)
        ),
    )
}

fn focal_formula() -> Outcome {
    let cfg = FocalLossConfig {
        alpha: [1.0, 1.0],
        gamma: 2.0,
    };
    let hand = 0.25 * std::f64::consts::LN_2;
    let v = focal_loss(0.5, &cfg, Label::Conduct);
    let hand_ok =
        (v - hand).abs() <= FOCAL_HAND_TOL && (v - FOCAL_HAND_VALUE).abs() <= FOCAL_HAND_ROUNDING;

    let ce_cfg = FocalLossConfig {
        alpha: [1.0, 1.0],
        gamma: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let p: f64 = rng.gen_range(1e-6..1.0);
        let label = if i % 2 == 0 {
            Label::Skip
        } else {
            Label::Conduct
        };
        worst = worst.max((focal_loss(p, &ce_cfg, label) + p.ln()).abs());
    }
    Outcome::new(
        hand_ok && worst <= FORMULA_TOL,
        format!("FL(0.5; γ=2, α=1) = {v:.6}; γ=0 vs CE max |error| {worst:.1e} on 1000 draws"),
    )
}

fn knn_oracle() -> Outcome {
    match support::knn_matches_brute_force(50) {
        Ok(()) => Outcome::new(
            true,
            "50 stores (N ≤ 5000, d ≤ 64, half with engineered ties) match a full scan",
        ),
        Err(e) => Outcome::new(false, e),
    }
}

fn gradient_suites() -> Outcome {
    let checks = [
        ("base model", support::base_model_gradients(5)),
        ("Tran-λ", support::lambda_gradients(LambdaMode::Tran, 5)),
        ("Bina-λ", support::lambda_gradients(LambdaMode::Bina, 5)),
        ("skip classifier", support::classifier_gradients(5)),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    if failures.is_empty() {
        Outcome::new(
            true,
            format!(
                "base model, Tran-λ, Bina-λ, classifier: 5 configs each, rel. error < {:.0e}",
                support::REL_TOL
            ),
        )
    } else {
        Outcome::new(false, failures.join("; "))
    }
}

fn degeneracies(r: &Reference) -> Outcome {
    let pairs = &r.domain.test[..DEGENERACY_SENTENCES.min(r.domain.test.len())];
    let ctx = context(r);
    let decode = |mode: &DecodeMode| -> Vec<Vec<u32>> {
        ctx.decode(mode, pairs)
            .unwrap()
            .traces
            .into_iter()
            .map(|t| t.output)
            .collect()
    };
    let hidden = r.cfg.classifier.hidden;
    let skip_all = DecodeMode::DrSkip {
        classifier: SkipClassifier::constant(hidden, 0.0),
        schedule: r.sched,
    };
    let conduct_all = DecodeMode::DrSkip {
        classifier: SkipClassifier::constant(hidden, 1.0),
        schedule: r.sched,
    };
    let base = decode(&DecodeMode::BaseOnly);
    let vanilla = decode(&DecodeMode::VanillaKnn);
    let skip_ok = decode(&skip_all) == base;
    let conduct_ok = decode(&conduct_all) == vanilla;
    let tokens: usize =
        base.iter().map(Vec::len).sum::<usize>() + vanilla.iter().map(Vec::len).sum::<usize>();
    Outcome::new(
        skip_ok && conduct_ok,
        format!(
            "{} sentences, {tokens} tokens compared; skip-all = base_only: {skip_ok}, conduct-all = vanilla_knn: {conduct_ok}",
            pairs.len()
        ),
    )
}

/// Recomputes each label twice: from the stored meta by the rule itself,
/// and from a fresh teacher-forced pass plus search.
fn labels(r: &Reference) -> Outcome {
    let samples: Vec<&TrainingSample> = r.sets.train.iter().chain(&r.sets.heldout).collect();
    let mut meta_mismatch = 0;
    let mut fresh_mismatch = 0;
    let mut by_pair: std::collections::BTreeMap<usize, Vec<&TrainingSample>> = Default::default();
    for s in &samples {
        let rule = s.meta.nmt_rank != 1 && s.meta.in_neighbors;
        if rule != (s.label == Label::Conduct) {
            meta_mismatch += 1;
        }
        by_pair.entry(s.meta.pair_id).or_default().push(s);
    }
    let k = r.cfg.knn.k;
    for (&pair_id, group) in &by_pair {
        let pair = &r.domain.valid[pair_id];
        let steps = teacher_force_pass(&r.params, pair).unwrap();
        let queries: Vec<Vec<f32>> = steps
            .iter()
            .map(|s| s.hidden.iter().map(|&h| h as f32).collect())
            .collect();
        let refs: Vec<&[f32]> = queries.iter().map(Vec::as_slice).collect();
        let neighbors = r
            .store
            .query_knn_batch(&refs, k, r.cfg.parallelism)
            .unwrap();
        for s in group {
            let t = s.timestep;
            let y = pair.target[t];
            let top = argmax(&steps[t].dist);
            let retrieved = neighbors[t].iter().any(|n| n.value == y);
            let conduct = top != y as usize && retrieved;
            if conduct != (s.label == Label::Conduct) || s.meta.target != y {
                fresh_mismatch += 1;
            }
        }
    }
    Outcome::new(
        meta_mismatch == 0 && fresh_mismatch == 0,
        format!(
            "{} validation samples over {} pairs; mismatches from meta {meta_mismatch}, from fresh recomputation {fresh_mismatch}",
            samples.len(),
            by_pair.len()
        ),
    )
}

fn bench_row<'a>(rows: &'a [BenchResult], mode: &str) -> &'a BenchResult {
    rows.iter()
        .find(|b| b.mode == mode && b.batch_size == BENCH_BATCH)
        .unwrap_or_else(|| panic!("no {mode} row in the benchmark"))
}

fn bleu_and_retrievals(r: &Reference) -> Outcome {
    let base = bench_row(&r.bench, "base_only");
    let vanilla = bench_row(&r.bench, "vanilla_knn");
    let dr = bench_row(&r.bench, "dr_skip");
    let gain = vanilla.bleu.score - base.bleu.score;
    let retained = (dr.bleu.score - base.bleu.score) / gain;
    let share = dr.retrievals as f64 / vanilla.retrievals as f64;
    Outcome::new(
        gain >= MIN_BLEU_GAIN && retained >= MIN_GAIN_RETAINED && share <= MAX_RETRIEVAL_SHARE,
        format!(
            "store {} rows; BLEU base {:.2}, vanilla {:.2} (gain {gain:.2} ≥ {MIN_BLEU_GAIN}), dr_skip {:.2} keeps {:.1}% of the gain (≥ {:.0}%) with {:.1}% of vanilla's retrievals (≤ {:.0}%)",
            r.store.len(),
            base.bleu.score,
            vanilla.bleu.score,
            dr.bleu.score,
            100.0 * retained,
            100.0 * MIN_GAIN_RETAINED,
            100.0 * share,
            100.0 * MAX_RETRIEVAL_SHARE
        ),
    )
}

fn skip_f1(r: &Reference) -> Outcome {
    let tran = load_estimator(&r.cfg.paths.estimator_tran).unwrap();
    let clf_f1 = dr_skip_f1(&r.clf, &r.sched, &r.sets.test)
        .unwrap()
        .f1
        .unwrap_or(0.0);
    let ar: Vec<(f64, f64)> = r
        .cfg
        .ar
        .alphas
        .iter()
        .map(|&a| {
            (
                a,
                ar_skip_f1(&tran, a, &r.sets.test)
                    .unwrap()
                    .f1
                    .unwrap_or(0.0),
            )
        })
        .collect();
    let (best_alpha, best) = ar
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, x| {
            if x.1 > acc.1 {
                x
            } else {
                acc
            }
        });
    Outcome::new(
        clf_f1 > best,
        format!(
            "{} held-out steps; classifier F1 {clf_f1:.4} vs Tran-λ best {best:.4} (α = {best_alpha}); all α: {}",
            r.sets.test.len(),
            ar.iter().map(|(a, f)| format!("{a}: {f:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn divergence(r: &Reference) -> Outcome {
    let tran = load_estimator(&r.cfg.paths.estimator_tran).unwrap();
    let bina = load_estimator(&r.cfg.paths.estimator_bina).unwrap();
    let stream: Vec<_> = r.sets.test.iter().map(|s| s.features).collect();
    let stats = lambda_divergence_stats(&tran, &bina, &stream).unwrap();
    // Second pass: per-step differences first, then the two aggregates.
    let diffs: Vec<f64> = stream
        .iter()
        .map(|f| (bina.lambda(f) - tran.lambda(f)).abs())
        .collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let frac = diffs.iter().filter(|&&d| d > 0.2).count() as f64 / diffs.len() as f64;
    let exact =
        stats.mean_abs_diff == mean && stats.frac_gt_02 == frac && stats.count == stream.len();
    Outcome::new(
        stats.mean_abs_diff > 0.0 && exact,
        format!(
            "{} steps; mean |λ_bina − λ_tran| {:.4}, fraction > 0.2 {:.4}; independent recount identical: {exact}",
            stats.count, stats.mean_abs_diff, stats.frac_gt_02
        ),
    )
}

fn throughput(r: &Reference) -> Outcome {
    let base = bench_row(&r.bench, "base_only");
    let vanilla = bench_row(&r.bench, "vanilla_knn");
    let dr = bench_row(&r.bench, "dr_skip");
    Outcome::new(
        base.tok_per_sec > dr.tok_per_sec && dr.tok_per_sec > vanilla.tok_per_sec && base.repetitions == BENCH_REPETITIONS,
        format!(
            "batch {BENCH_BATCH}, median of {} reps, {} worker(s): base_only {:.0} > dr_skip {:.0} > vanilla_knn {:.0} tok/s",
            base.repetitions, base.workers, base.tok_per_sec, dr.tok_per_sec, vanilla.tok_per_sec
        ),
    )
}

fn monotone_sweep(r: &Reference) -> Outcome {
    let rates: Vec<f64> = r.sweep.iter().map(|b| b.retrieval_rate).collect();
    let alphas: Vec<f64> = r.sweep.iter().filter_map(|b| b.alpha_min).collect();
    let ordered = alphas.windows(2).all(|w| w[0] < w[1]);
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    Outcome::new(
        ordered && monotone && rates.len() == 3,
        format!(
            "α_min {alphas:?} -> retrieval rate {}",
            rates
                .iter()
                .map(|x| format!("{x:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn serialization(r: &Reference) -> Outcome {
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    let corpus_path = r.cfg.corpus_path(&r.cfg.active_domain().name);
    let corpus_bytes = read(&corpus_path);
    let corpus_ok = corpus_to_string(&skipknn::corpus::load_corpus(&corpus_path).unwrap())
        .as_bytes()
        == corpus_bytes;

    let model_bytes = read(&r.cfg.paths.model);
    let model_ok = model_to_bytes(&model_from_bytes(&model_bytes).unwrap()) == model_bytes;

    let store_bytes = read(&r.cfg.paths.store);
    let store = store_from_bytes(&store_bytes).unwrap();
    let store_ok = store_to_bytes(&store) == store_bytes;
    let size_ok = store_bytes.len() == store_file_size(store.len(), store.dim());

    let clf_bytes = read(&r.cfg.paths.classifier);
    let (clf, sched) = classifier_from_bytes(&clf_bytes).unwrap();
    let clf_ok = classifier_to_bytes(&clf, &sched) == clf_bytes;
    Outcome::new(
        corpus_ok && model_ok && store_ok && size_ok && clf_ok,
        format!(
            "corpus {corpus_ok}, model {model_ok}, store {store_ok} ({} bytes = 24 + 4·N·d + 4·N: {size_ok}), classifier {clf_ok}",
            store_bytes.len()
        ),
    )
}

fn context(r: &Reference) -> EvalContext<'_> {
    EvalContext {
        params: &r.params,
        store: &r.store,
        knn: &r.cfg.knn,
        batch_size: r.cfg.bench.eval_batch_size,
        par: r.cfg.parallelism,
    }
}

fn line(id: u32, name: &str, budget: Option<Duration>, elapsed: Duration, o: &Outcome) -> bool {
    let in_budget = budget.is_none_or(|b| elapsed <= b);
    let pass = o.pass && in_budget;
    let budget_note = budget.map_or_else(String::new, |b| format!(" / budget {}s", b.as_secs()));
    println!(
        "[{}] {id:>2} {name}: {} ({:.1}s{budget_note})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut passes = Vec::new();

    let (o, e) = timed(threshold_formula);
    passes.push(line(1, "threshold schedule formula", Some(secs(1)), e, &o));
    let (o, e) = timed(focal_formula);
    passes.push(line(2, "focal loss values", Some(secs(1)), e, &o));
    let (o, e) = timed(knn_oracle);
    passes.push(line(3, "exact kNN vs brute force", Some(secs(30)), e, &o));
    let (o, e) = timed(gradient_suites);
    passes.push(line(4, "gradient suites", Some(secs(120)), e, &o));

    println!("building the reference setup (corpus, base model, store, samples, classifier, λ estimators, benchmark, sweep)");
    let r = match build_reference() {
        Ok(r) => r,
        Err(e) => {
            println!("reference setup failed: {e}");
            for (id, name) in [
                (5, "degenerate classifiers"),
                (6, "label recomputation"),
                (7, "BLEU gain and retrieval savings"),
                (8, "skip F1 vs λ thresholding"),
                (9, "Tran-λ vs Bina-λ divergence"),
                (10, "throughput ordering"),
                (11, "α_min monotonicity"),
                (12, "serialization"),
            ] {
                println!("[FAIL] {id:>2} {name}: reference setup unavailable");
            }
            return ExitCode::FAILURE;
        }
    };
    println!(
        "reference setup: {:.1}s training, {:.1}s benchmark, {:.1}s sweep",
        r.setup.as_secs_f64(),
        r.bench_time.as_secs_f64(),
        r.sweep_time.as_secs_f64()
    );

    let (o, e) = timed(|| degeneracies(&r));
    passes.push(line(5, "degenerate classifiers", Some(secs(60)), e, &o));
    let (o, e) = timed(|| labels(&r));
    passes.push(line(6, "label recomputation", Some(secs(60)), e, &o));
    let (o, e) = timed(|| bleu_and_retrievals(&r));
    passes.push(line(7, "BLEU gain and retrieval savings", None, e, &o));
    let (o, e) = timed(|| skip_f1(&r));
    passes.push(line(8, "skip F1 vs λ thresholding", None, e, &o));
    let (o, e) = timed(|| divergence(&r));
    passes.push(line(9, "Tran-λ vs Bina-λ divergence", None, e, &o));
    let (o, _) = timed(|| throughput(&r));
    passes.push(line(
        10,
        "throughput ordering",
        Some(secs(600)),
        r.bench_time,
        &o,
    ));
    let (o, _) = timed(|| monotone_sweep(&r));
    passes.push(line(
        11,
        "α_min monotonicity",
        Some(secs(300)),
        r.sweep_time,
        &o,
    ));
    let (o, e) = timed(|| serialization(&r));
    passes.push(line(12, "serialization", Some(secs(30)), e, &o));

    let failed = passes.iter().filter(|p| !**p).count();
    println!(
        "{} of {} criteria passed",
        passes.len() - failed,
        passes.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
