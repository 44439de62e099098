//! `skipknn`: run the retrieval-skipping pipeline stage by stage.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use skipknn::pipeline::{self, ModeName, PipelineConfig};

#[derive(Parser, Debug)]
#[command(
    name = "skipknn",
    version,
    about = "kNN decoding with learned retrieval skipping on a synthetic translation task"
)]
struct Cli {
    /// JSON pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch decoding, overriding the config's `workers`.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Retrieval threshold floor, overriding `threshold.alpha_min`.
    #[arg(long, global = true, value_name = "A")]
    alpha_min: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the vocabulary and the general and domain corpora.
    GenCorpus,
    /// Train the base translation model on the general corpus.
    TrainBase,
    /// Build the domain datastore from the base model.
    BuildStore,
    /// Build classifier training, held-out and test samples.
    BuildSamples,
    /// Train the skip classifier.
    TrainClassifier,
    /// Train the Tran-λ and Bina-λ estimators.
    TrainAr,
    /// Translate the domain test split and write decoding traces.
    Translate {
        #[arg(long, value_enum, default_value = "dr-skip")]
        mode: Mode,
    },
    /// Benchmark every configured mode and write report.csv and report.md.
    Bench,
    /// Measure BLEU gains from retrieval restricted to early timesteps.
    AnalyzeIntervals,
    /// Decode the validation split once per configured α_min.
    SweepAlpha,
    /// Compare Tran-λ and Bina-λ predictions on the test stream.
    LambdaStats,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    BaseOnly,
    VanillaKnn,
    ArSkip,
    DrSkip,
}

impl From<Mode> for ModeName {
    fn from(m: Mode) -> Self {
        match m {
            Mode::BaseOnly => ModeName::BaseOnly,
            Mode::VanillaKnn => ModeName::VanillaKnn,
            Mode::ArSkip => ModeName::ArSkip,
            Mode::DrSkip => ModeName::DrSkip,
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"))
}

fn load_config(cli: &Cli) -> skipknn::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(a) = cli.alpha_min {
        cfg.threshold.alpha_min = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> skipknn::Result<String> {
    let cfg = load_config(cli)?;
    Ok(match &cli.command {
        Command::GenCorpus => {
            let s = pipeline::gen_corpus(&cfg)?;
            let domains: Vec<String> = s
                .domain_pairs
                .iter()
                .map(|(n, c)| format!("{n} {c}"))
                .collect();
            format!(
                "gen-corpus: vocab {}, general {} pairs, domain pairs [{}], term sources in general: {} rare, {} excluded",
                s.vocab_size,
                s.general_pairs,
                domains.join(", "),
                s.rare_sources,
                s.excluded_sources
            )
        }
        Command::TrainBase => {
            let s = pipeline::train_base_stage(&cfg)?;
            format!(
                "train-base: {} pairs, held-out accuracy {:.4}, domain accuracy {:.4} -> {}",
                s.train_pairs,
                s.heldout_accuracy,
                s.domain_accuracy,
                cfg.paths.model.display()
            )
        }
        Command::BuildStore => {
            let s = pipeline::build_store_stage(&cfg)?;
            format!(
                "build-store: {} rows of dim {}, {} bytes -> {}",
                s.rows,
                s.dim,
                s.file_bytes,
                cfg.paths.store.display()
            )
        }
        Command::BuildSamples => {
            let (_, s) = pipeline::build_samples_stage(&cfg)?;
            format!(
                "build-samples: train {}, held-out {}, test {}, conduct fraction {:.3}",
                s.train, s.heldout, s.test, s.train_conduct_fraction
            )
        }
        Command::TrainClassifier => {
            let (_, _, s) = pipeline::train_classifier_stage(&cfg)?;
            format!(
                "train-classifier: best epoch {}, held-out F1 {}, test F1 {}, T {:.2} -> {}",
                s.best_epoch
                    .map_or_else(|| "n/a".to_owned(), |e| e.to_string()),
                opt(s.heldout_f1),
                opt(s.test_f1),
                s.t_mean,
                cfg.paths.classifier.display()
            )
        }
        Command::TrainAr => {
            let s = pipeline::train_ar_stage(&cfg)?;
            let f1: Vec<String> = s
                .tran_f1
                .iter()
                .map(|(a, f)| format!("α {a}: {}", opt(*f)))
                .collect();
            format!(
                "train-ar: Tran-λ F1 [{}], mean |Δλ| {:.4}",
                f1.join(", "),
                s.divergence.mean_abs_diff
            )
        }
        Command::Translate { mode } => {
            let s = pipeline::translate_stage(&cfg, (*mode).into())?;
            format!(
                "translate: {} on {} sentences, BLEU {:.2}, retrieval rate {:.3} -> {}",
                s.mode,
                s.sentences,
                s.bleu.score,
                s.retrieval_rate,
                cfg.paths.traces.display()
            )
        }
        Command::Bench => {
            let s = pipeline::bench_stage(&cfg)?;
            let rows: Vec<String> = s
                .rows
                .iter()
                .map(|r| {
                    format!(
                        "{}@{} {:.0} tok/s BLEU {:.2}",
                        r.mode, r.batch_size, r.tok_per_sec, r.bleu.score
                    )
                })
                .collect();
            format!("bench: {} -> {}", rows.join("; "), s.report_csv.display())
        }
        Command::AnalyzeIntervals => {
            let r = pipeline::analyze_intervals_stage(&cfg)?;
            let rows: Vec<String> = r
                .rows
                .iter()
                .map(|x| format!("R={} {:+.2}", x.r, x.delta_bleu))
                .collect();
            format!("analyze-intervals: {}", rows.join(", "))
        }
        Command::SweepAlpha => {
            let rows = pipeline::sweep_alpha_stage(&cfg)?;
            let rows: Vec<String> = rows
                .iter()
                .map(|r| {
                    format!(
                        "α_min {} rate {:.3} BLEU {:.2}",
                        opt(r.alpha_min),
                        r.retrieval_rate,
                        r.bleu.score
                    )
                })
                .collect();
            format!("sweep-alpha: {}", rows.join("; "))
        }
        Command::LambdaStats => {
            let s = pipeline::lambda_stats_stage(&cfg)?;
            format!(
                "lambda-stats: {} steps, mean |λ_bina − λ_tran| {:.4}, fraction > 0.2 {:.4}",
                s.count, s.mean_abs_diff, s.frac_gt_02
            )
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            log::debug!("{e:?}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
