//! End-to-end stages driven by one JSON configuration.
//!
//! Every stage reads its inputs from the configured paths and writes its
//! artifacts back, so stages can run as separate processes. All randomness is
//! derived from the single `seed` field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ar::{
    ar_skip_f1, lambda_divergence_stats, load_estimator, save_estimator, train_lambda, ArConfig,
    DivergenceStats, LambdaMode, LambdaTrainConfig,
};
use crate::classifier::{
    balanced_focal, build_training_samples, conventional_label, criteria_label, load_classifier,
    load_samples, save_classifier, save_samples, train_classifier, ClassifierTrainConfig,
    FocalLossConfig, Objective, SkipClassifier, ThresholdSchedule, TrainingSample,
};
use crate::corpus::{
    corpus_stats, generate_domain, load_corpus, save_corpus, split_holdout, CorpusSplit,
    DomainSpec, LengthRange, SplitSizes, TermRate, Vocab,
};
use crate::datastore::{build_datastore, load_store, prune_random, save_store, Datastore};
use crate::engine::{save_traces, DecodeMode};
use crate::error::{Error, Result};
use crate::eval::{
    alpha_min_sweep, benchmark, dr_skip_f1, interval_analysis, run_bleu, write_intervals_csv,
    write_report_csv, write_report_md, BenchMode, BenchResult, BleuScore, EvalContext,
    IntervalReport, ReportExtras,
};
use crate::knn::KnnConfig;
use crate::model::{
    load_model, save_model, teacher_forced_accuracy, train_base, ModelConfig, ModelParams,
};
use crate::parallel::{current_workers, Parallelism};

/// Top-level configuration. Unknown keys are rejected at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: ModelSettings,
    pub knn: KnnConfig,
    pub store: StoreSettings,
    pub classifier: ClassifierSettings,
    pub threshold: ThresholdSettings,
    pub ar: ArSettings,
    pub bench: BenchSettings,
    pub parallelism: Parallelism,
    /// Worker threads for batch decoding; `None` uses every core.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub model: PathBuf,
    pub store: PathBuf,
    pub samples_dir: PathBuf,
    pub classifier: PathBuf,
    pub estimator_tran: PathBuf,
    pub estimator_bina: PathBuf,
    pub traces: PathBuf,
    pub reports_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Number of non-special tokens.
    pub regular_vocab: usize,
    pub lengths: LengthRange,
    pub general: GeneralDomain,
    /// Shifted domains; stages after `gen-corpus` use `active_domain`.
    pub domains: Vec<DomainConfig>,
    /// Defaults to the first entry of `domains`.
    pub active_domain: Option<String>,
    /// Per-position rate at which domain term sources occur in the general
    /// corpus; 0 keeps them out entirely.
    pub general_term_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralDomain {
    pub noise_rate: f64,
    pub sizes: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: String,
    pub shift_fraction: f64,
    #[serde(default = "default_noise")]
    pub noise_rate: f64,
    #[serde(default)]
    pub term_rate: TermRate,
    pub sizes: SplitSizes,
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub d: usize,
    pub d_ff: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreSettings {
    /// Random pruning applied after the build; 1 keeps every row.
    pub keep_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelCriteria {
    /// Conduct iff the gold token is not the NMT top-1 and is retrieved.
    Criteria,
    /// Conduct iff p_kNN(y) ≥ p_NMT(y).
    Conventional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal,
    WeightedCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    /// Share of the validation pairs used for training; the rest is held out
    /// for model selection.
    pub train_fraction: f64,
    pub gamma: f64,
    /// `[skip, conduct]`; inverse class frequency when absent.
    pub alpha: Option<[f64; 2]>,
    pub loss: LossKind,
    pub labels: LabelCriteria,
    pub feature_mask: [bool; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdSettings {
    pub alpha_min: f64,
    /// Mean validation target length when absent.
    #[serde(rename = "T")]
    pub t: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArSettings {
    /// Skip threshold used when decoding with `ar_skip`.
    pub alpha: f64,
    /// Thresholds scanned for the teacher-forced F1 comparison.
    pub alphas: Vec<f64>,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    /// Batch size for BLEU-only decoding (translate, sweep, intervals).
    pub eval_batch_size: usize,
    pub alpha_min_sweep: Vec<f64>,
    pub interval_step: usize,
    pub modes: Vec<ModeName>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    BaseOnly,
    VanillaKnn,
    ArSkip,
    DrSkip,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: ModelSettings::default(),
            knn: KnnConfig::default(),
            store: StoreSettings::default(),
            classifier: ClassifierSettings::default(),
            threshold: ThresholdSettings::default(),
            ar: ArSettings::default(),
            bench: BenchSettings::default(),
            parallelism: Parallelism::default(),
            workers: None,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self::under(Path::new("artifacts"))
    }
}

impl Paths {
    /// Default file names under `root`.
    pub fn under(root: &Path) -> Self {
        Self {
            corpus_dir: root.join("corpus"),
            model: root.join("base.rgdm"),
            store: root.join("domain.kvds"),
            samples_dir: root.join("samples"),
            classifier: root.join("skip.rgsc"),
            estimator_tran: root.join("lambda_tran.rgle"),
            estimator_bina: root.join("lambda_bina.rgle"),
            traces: root.join("traces.jsonl"),
            reports_dir: root.join("reports"),
        }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            regular_vocab: 1000,
            lengths: LengthRange::default(),
            general: GeneralDomain::default(),
            domains: vec![DomainConfig {
                name: "it".to_owned(),
                shift_fraction: 0.3,
                noise_rate: default_noise(),
                term_rate: TermRate::default(),
                sizes: SplitSizes {
                    train: 5600,
                    valid: 500,
                    test: 200,
                },
            }],
            active_domain: None,
            general_term_rate: 0.01,
        }
    }
}

impl Default for GeneralDomain {
    fn default() -> Self {
        Self {
            noise_rate: default_noise(),
            sizes: SplitSizes {
                train: 3000,
                valid: 200,
                test: 200,
            },
        }
    }
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            epochs: m.epochs,
            lr: m.lr,
            batch_size: m.batch_size,
            d: m.d,
            d_ff: m.d_ff,
        }
    }
}

impl Default for StoreSettings {
    fn default() -> Self {
        Self { keep_fraction: 1.0 }
    }
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        let c = ClassifierTrainConfig::default();
        Self {
            epochs: c.epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            hidden: c.hidden,
            train_fraction: 0.9,
            gamma: 2.0,
            alpha: None,
            loss: LossKind::Focal,
            labels: LabelCriteria::Criteria,
            feature_mask: [true; 3],
        }
    }
}

impl Default for ThresholdSettings {
    fn default() -> Self {
        Self {
            alpha_min: 0.4,
            t: None,
        }
    }
}

impl Default for ArSettings {
    fn default() -> Self {
        let t = LambdaTrainConfig::default();
        Self {
            alpha: 0.5,
            alphas: vec![0.25, 0.5, 0.75],
            hidden: ArConfig::default().hidden,
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
        }
    }
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batch_sizes: vec![1, 16, 32, 64, 128],
            repetitions: 5,
            eval_batch_size: 128,
            alpha_min_sweep: vec![0.35, 0.40, 0.45],
            interval_step: 5,
            modes: vec![
                ModeName::BaseOnly,
                ModeName::VanillaKnn,
                ModeName::ArSkip,
                ModeName::DrSkip,
            ],
        }
    }
}

fn unit(field: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::config(format!("{field} = {v} must be in [0, 1]")));
    }
    Ok(())
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(format!("{field} must be at least 1")));
    }
    Ok(())
}

/// Derived component seed: first 8 bytes of SHA-256(master ‖ label).
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("32-byte digest"))
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every numeric field against its documented range.
    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        positive("corpus.regular_vocab", c.regular_vocab)?;
        if c.lengths.min < 1 || c.lengths.max < c.lengths.min {
            return Err(Error::config("corpus.lengths needs 1 ≤ min ≤ max"));
        }
        unit("corpus.general.noise_rate", c.general.noise_rate)?;
        unit("corpus.general_term_rate", c.general_term_rate)?;
        if c.domains.is_empty() {
            return Err(Error::config(
                "corpus.domains must name at least one domain",
            ));
        }
        for (i, d) in c.domains.iter().enumerate() {
            unit(
                &format!("corpus.domains[{i}].shift_fraction"),
                d.shift_fraction,
            )?;
            unit(&format!("corpus.domains[{i}].noise_rate"), d.noise_rate)?;
            unit(
                &format!("corpus.domains[{i}].term_rate.start"),
                d.term_rate.start,
            )?;
            unit(
                &format!("corpus.domains[{i}].term_rate.end"),
                d.term_rate.end,
            )?;
        }
        if let Some(name) = &c.active_domain {
            if !c.domains.iter().any(|d| &d.name == name) {
                return Err(Error::config(format!(
                    "corpus.active_domain '{name}' is not in corpus.domains"
                )));
            }
        }
        positive("model.epochs", self.model.epochs.max(1))?;
        positive("model.batch_size", self.model.batch_size)?;
        positive("model.d", self.model.d)?;
        positive("model.d_ff", self.model.d_ff)?;
        if !(self.model.lr > 0.0) {
            return Err(Error::config("model.lr must be positive"));
        }
        self.knn.validate()?;
        if !(self.store.keep_fraction > 0.0 && self.store.keep_fraction <= 1.0) {
            return Err(Error::config("store.keep_fraction must be in (0, 1]"));
        }
        let k = &self.classifier;
        positive("classifier.batch_size", k.batch_size)?;
        positive("classifier.hidden", k.hidden)?;
        if !(k.train_fraction > 0.0 && k.train_fraction < 1.0) {
            return Err(Error::config("classifier.train_fraction must be in (0, 1)"));
        }
        if let Some(alpha) = k.alpha {
            FocalLossConfig {
                alpha,
                gamma: k.gamma,
            }
            .validate()?;
        } else if !(k.gamma >= 0.0) {
            return Err(Error::config("classifier.gamma must be non-negative"));
        }
        if !(0.0..=0.5).contains(&self.threshold.alpha_min) {
            return Err(Error::config("threshold.alpha_min must be in [0, 0.5]"));
        }
        if let Some(t) = self.threshold.t {
            if !(t > 0.0) {
                return Err(Error::config("threshold.T must be positive"));
            }
        }
        unit("ar.alpha", self.ar.alpha)?;
        for a in &self.ar.alphas {
            unit("ar.alphas[]", *a)?;
        }
        positive("ar.hidden", self.ar.hidden)?;
        positive("ar.batch_size", self.ar.batch_size)?;
        let b = &self.bench;
        if b.batch_sizes.contains(&0) {
            return Err(Error::config(
                "bench.batch_sizes entries must be at least 1",
            ));
        }
        if b.repetitions < 3 {
            return Err(Error::config("bench.repetitions must be at least 3"));
        }
        positive("bench.eval_batch_size", b.eval_batch_size)?;
        positive("bench.interval_step", b.interval_step)?;
        for a in &b.alpha_min_sweep {
            if !(0.0..=0.5).contains(a) {
                return Err(Error::config(
                    "bench.alpha_min_sweep entries must be in [0, 0.5]",
                ));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        Ok(())
    }

    /// Sets the master seed (the CLI `--seed` flag).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn active_domain(&self) -> &DomainConfig {
        match &self.corpus.active_domain {
            Some(name) => self
                .corpus
                .domains
                .iter()
                .find(|d| &d.name == name)
                .expect("validated active domain"),
            None => &self.corpus.domains[0],
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths.corpus_dir.join("vocab.txt")
    }

    pub fn corpus_path(&self, domain: &str) -> PathBuf {
        self.paths.corpus_dir.join(format!("{domain}.txt"))
    }

    pub fn samples_path(&self, part: &str) -> PathBuf {
        self.paths.samples_dir.join(format!("{part}.jsonl"))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            epochs: self.model.epochs,
            lr: self.model.lr,
            batch_size: self.model.batch_size,
            d: self.model.d,
            d_ff: self.model.d_ff,
            seed: derive_seed(self.seed, "model"),
        }
    }

    pub fn classifier_config(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.classifier.epochs,
            lr: self.classifier.lr,
            batch_size: self.classifier.batch_size,
            hidden: self.classifier.hidden,
            seed: derive_seed(self.seed, "classifier"),
            feature_mask: self.classifier.feature_mask,
        }
    }

    pub fn ar_config(&self) -> ArConfig {
        ArConfig {
            alpha: self.ar.alpha,
            hidden: self.ar.hidden,
        }
    }

    pub fn lambda_config(&self) -> LambdaTrainConfig {
        LambdaTrainConfig {
            epochs: self.ar.epochs,
            lr: self.ar.lr,
            batch_size: self.ar.batch_size,
            seed: derive_seed(self.seed, "lambda"),
        }
    }

    /// Runs `f` on a pool with the configured worker count.
    pub fn run_with_workers<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match self.workers {
            Some(n) => crate::parallel::with_workers(n, f),
            None => f(),
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing {
            path: path.to_owned(),
            what: what.to_owned(),
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Domain specs for the configured vocabulary and seed.
pub fn domain_specs(cfg: &PipelineConfig, vocab: &Vocab) -> Result<(DomainSpec, Vec<DomainSpec>)> {
    let mut general = DomainSpec::general(
        vocab,
        cfg.corpus.general.noise_rate,
        derive_seed(cfg.seed, "general"),
    );
    let mut domains = Vec::with_capacity(cfg.corpus.domains.len());
    for d in &cfg.corpus.domains {
        domains.push(DomainSpec::shifted(
            d.name.clone(),
            &general,
            d.shift_fraction,
            d.noise_rate,
            derive_seed(cfg.seed, &format!("domain:{}", d.name)),
            d.term_rate,
        )?);
    }
    let mut terms: Vec<_> = domains
        .iter()
        .flat_map(|d| d.terms.iter().copied())
        .collect();
    terms.sort_unstable();
    terms.dedup();
    let rate = cfg.corpus.general_term_rate;
    if rate > 0.0 {
        general.terms = terms;
        general.term_rate = TermRate {
            start: rate,
            end: rate,
            ramp: 0,
        };
    } else {
        general.excluded_sources = terms;
    }
    Ok((general, domains))
}

#[derive(Clone, Debug, Serialize)]
pub struct CorpusSummary {
    pub vocab_size: usize,
    pub general_pairs: usize,
    pub domain_pairs: Vec<(String, usize)>,
    pub excluded_sources: usize,
    pub rare_sources: usize,
}

pub fn gen_corpus(cfg: &PipelineConfig) -> Result<CorpusSummary> {
    let vocab = Vocab::synthetic(cfg.corpus.regular_vocab);
    let (general, domains) = domain_specs(cfg, &vocab)?;
    ensure_dir(&cfg.paths.corpus_dir)?;
    vocab.save(&cfg.vocab_path())?;
    let g = generate_domain(
        &vocab,
        &general,
        cfg.corpus.general.sizes,
        cfg.corpus.lengths,
    )?;
    save_corpus(&g, &cfg.corpus_path("general"))?;
    let mut domain_pairs = Vec::new();
    for (spec, dc) in domains.iter().zip(&cfg.corpus.domains) {
        let split = generate_domain(&vocab, spec, dc.sizes, cfg.corpus.lengths)?;
        save_corpus(&split, &cfg.corpus_path(&dc.name))?;
        domain_pairs.push((
            dc.name.clone(),
            split.train.len() + split.valid.len() + split.test.len(),
        ));
    }
    Ok(CorpusSummary {
        vocab_size: vocab.len(),
        general_pairs: g.train.len() + g.valid.len() + g.test.len(),
        domain_pairs,
        excluded_sources: general.excluded_sources.len(),
        rare_sources: general.terms.len(),
    })
}

pub fn load_general(cfg: &PipelineConfig) -> Result<CorpusSplit> {
    let p = cfg.corpus_path("general");
    require(&p, "general corpus (run gen-corpus)")?;
    load_corpus(&p)
}

pub fn load_domain(cfg: &PipelineConfig) -> Result<CorpusSplit> {
    let p = cfg.corpus_path(&cfg.active_domain().name);
    require(&p, "domain corpus (run gen-corpus)")?;
    load_corpus(&p)
}

pub fn load_base(cfg: &PipelineConfig) -> Result<ModelParams> {
    require(&cfg.paths.model, "base model (run train-base)")?;
    load_model(&cfg.paths.model)
}

pub fn load_domain_store(cfg: &PipelineConfig) -> Result<Datastore> {
    require(&cfg.paths.store, "datastore (run build-store)")?;
    load_store(&cfg.paths.store)
}

pub fn load_skip_classifier(cfg: &PipelineConfig) -> Result<(SkipClassifier, ThresholdSchedule)> {
    require(
        &cfg.paths.classifier,
        "skip classifier (run train-classifier)",
    )?;
    let (clf, mut sched) = load_classifier(&cfg.paths.classifier)?;
    sched.alpha_min = cfg.threshold.alpha_min;
    sched.validate()?;
    Ok((clf, sched))
}

#[derive(Clone, Debug, Serialize)]
pub struct BaseSummary {
    pub train_pairs: usize,
    pub heldout_accuracy: f64,
    pub domain_accuracy: f64,
}

pub fn train_base_stage(cfg: &PipelineConfig) -> Result<BaseSummary> {
    let general = load_general(cfg)?;
    let params = train_base(&general.train, general.vocab_size, &cfg.model_config())?;
    ensure_parent(&cfg.paths.model)?;
    save_model(&params, &cfg.paths.model)?;
    let domain = load_domain(cfg).ok();
    Ok(BaseSummary {
        train_pairs: general.train.len(),
        heldout_accuracy: teacher_forced_accuracy(&params, &general.valid)?,
        domain_accuracy: match domain {
            Some(d) => teacher_forced_accuracy(&params, &d.valid)?,
            None => f64::NAN,
        },
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct StoreSummary {
    pub rows: usize,
    pub dim: usize,
    pub file_bytes: u64,
}

pub fn build_store_stage(cfg: &PipelineConfig) -> Result<StoreSummary> {
    let params = load_base(cfg)?;
    let domain = load_domain(cfg)?;
    let mut store = build_datastore(&params, &domain.train)?;
    if cfg.store.keep_fraction < 1.0 {
        store = prune_random(
            &store,
            cfg.store.keep_fraction,
            derive_seed(cfg.seed, "prune"),
        )?;
    }
    ensure_parent(&cfg.paths.store)?;
    save_store(&store, &cfg.paths.store)?;
    let file_bytes = std::fs::metadata(&cfg.paths.store)
        .map_err(|e| Error::io(&cfg.paths.store, e))?
        .len();
    Ok(StoreSummary {
        rows: store.len(),
        dim: store.dim(),
        file_bytes,
    })
}

/// Training, held-out and test sample streams.
#[derive(Clone, Debug)]
pub struct SampleSets {
    pub train: Vec<TrainingSample>,
    pub heldout: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SamplesSummary {
    pub train: usize,
    pub heldout: usize,
    pub test: usize,
    pub train_conduct_fraction: f64,
    pub conventional_skip_fraction: f64,
}

fn relabel(samples: &mut [TrainingSample], criteria: LabelCriteria) {
    for s in samples {
        s.label = match criteria {
            LabelCriteria::Criteria => criteria_label(&s.meta),
            LabelCriteria::Conventional => conventional_label(&s.meta),
        };
    }
}

/// Builds samples from the validation split (train/held-out by
/// `train_fraction`) and from the test split.
pub fn build_samples_stage(cfg: &PipelineConfig) -> Result<(SampleSets, SamplesSummary)> {
    let params = load_base(cfg)?;
    let store = load_domain_store(cfg)?;
    let domain = load_domain(cfg)?;
    let (train_pairs, held_pairs) = split_holdout(&domain.valid, cfg.classifier.train_fraction);
    if held_pairs.is_empty() || train_pairs.is_empty() {
        return Err(Error::config(
            "validation split too small for the train/held-out split",
        ));
    }
    let sets = cfg.run_with_workers(|| -> Result<SampleSets> {
        let build = |pairs, first| {
            build_training_samples(&params, &store, pairs, first, &cfg.knn, cfg.parallelism)
        };
        Ok(SampleSets {
            train: build(train_pairs, 0)?,
            heldout: build(held_pairs, train_pairs.len())?,
            test: build(&domain.test, 0)?,
        })
    })?;
    ensure_dir(&cfg.paths.samples_dir)?;
    save_samples(&sets.train, &cfg.samples_path("train"))?;
    save_samples(&sets.heldout, &cfg.samples_path("heldout"))?;
    save_samples(&sets.test, &cfg.samples_path("test"))?;
    let conduct = sets.train.iter().filter(|s| s.label.is_conduct()).count();
    let conventional_skip = sets
        .train
        .iter()
        .filter(|s| !conventional_label(&s.meta).is_conduct())
        .count();
    let summary = SamplesSummary {
        train: sets.train.len(),
        heldout: sets.heldout.len(),
        test: sets.test.len(),
        train_conduct_fraction: conduct as f64 / sets.train.len() as f64,
        conventional_skip_fraction: conventional_skip as f64 / sets.train.len() as f64,
    };
    Ok((sets, summary))
}

/// Loads the sample files, relabelled under the configured criteria.
pub fn load_sample_sets(cfg: &PipelineConfig) -> Result<SampleSets> {
    let load = |part: &str| -> Result<Vec<TrainingSample>> {
        let p = cfg.samples_path(part);
        require(&p, "training samples (run build-samples)")?;
        let mut s = load_samples(&p)?;
        relabel(&mut s, cfg.classifier.labels);
        Ok(s)
    };
    Ok(SampleSets {
        train: load("train")?,
        heldout: load("heldout")?,
        test: load("test")?,
    })
}

/// T from the config, or the mean validation target length.
pub fn schedule_for(cfg: &PipelineConfig) -> Result<ThresholdSchedule> {
    let t = match cfg.threshold.t {
        Some(t) => t,
        None => corpus_stats(&load_domain(cfg)?.valid)?.mean_target_length,
    };
    ThresholdSchedule::new(cfg.threshold.alpha_min, t)
}

pub fn objective_for(cfg: &PipelineConfig, train: &[TrainingSample]) -> Objective {
    let focal = match cfg.classifier.alpha {
        Some(alpha) => FocalLossConfig {
            alpha,
            gamma: cfg.classifier.gamma,
        },
        None => balanced_focal(train, cfg.classifier.gamma),
    };
    match cfg.classifier.loss {
        LossKind::Focal => Objective::Focal(focal),
        LossKind::WeightedCe => Objective::WeightedCe { alpha: focal.alpha },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierSummary {
    pub best_epoch: Option<usize>,
    pub heldout_f1: Option<f64>,
    pub single_class: bool,
    pub t_mean: f64,
    pub test_f1: Option<f64>,
}

pub fn train_classifier_stage(
    cfg: &PipelineConfig,
) -> Result<(SkipClassifier, ThresholdSchedule, ClassifierSummary)> {
    let sets = load_sample_sets(cfg)?;
    let sched = schedule_for(cfg)?;
    let objective = objective_for(cfg, &sets.train);
    let (clf, report) = train_classifier(
        &sets.train,
        &sets.heldout,
        &objective,
        &cfg.classifier_config(),
    )?;
    ensure_parent(&cfg.paths.classifier)?;
    save_classifier(&clf, &sched, &cfg.paths.classifier)?;
    let test_f1 = dr_skip_f1(&clf, &sched, &sets.test)?.f1;
    Ok((
        clf,
        sched,
        ClassifierSummary {
            best_epoch: report.best_epoch,
            heldout_f1: report.best_heldout_f1,
            single_class: report.single_class,
            t_mean: sched.t_mean,
            test_f1,
        },
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct ArSummary {
    /// Teacher-forced F1 of the Tran-λ estimator per α on the test stream.
    pub tran_f1: Vec<(f64, Option<f64>)>,
    pub divergence: DivergenceStats,
}

pub fn train_ar_stage(cfg: &PipelineConfig) -> Result<ArSummary> {
    let sets = load_sample_sets(cfg)?;
    let ar = cfg.ar_config();
    let lc = cfg.lambda_config();
    let tran = train_lambda(LambdaMode::Tran, &sets.train, &ar, &lc)?;
    let bina = train_lambda(LambdaMode::Bina, &sets.train, &ar, &lc)?;
    ensure_parent(&cfg.paths.estimator_tran)?;
    save_estimator(&tran, &cfg.paths.estimator_tran)?;
    save_estimator(&bina, &cfg.paths.estimator_bina)?;
    let stream: Vec<_> = sets.test.iter().map(|s| s.features).collect();
    let tran_f1 = cfg
        .ar
        .alphas
        .iter()
        .map(|&a| Ok((a, ar_skip_f1(&tran, a, &sets.test)?.f1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArSummary {
        tran_f1,
        divergence: lambda_divergence_stats(&tran, &bina, &stream)?,
    })
}

pub fn lambda_stats_stage(cfg: &PipelineConfig) -> Result<DivergenceStats> {
    require(&cfg.paths.estimator_tran, "Tran-λ estimator (run train-ar)")?;
    require(&cfg.paths.estimator_bina, "Bina-λ estimator (run train-ar)")?;
    let tran = load_estimator(&cfg.paths.estimator_tran)?;
    let bina = load_estimator(&cfg.paths.estimator_bina)?;
    let sets = load_sample_sets(cfg)?;
    let stream: Vec<_> = sets.test.iter().map(|s| s.features).collect();
    let stats = lambda_divergence_stats(&tran, &bina, &stream)?;
    write_json(&stats, &cfg.paths.reports_dir.join("lambda_stats.json"))?;
    Ok(stats)
}

/// Builds a decode mode from trained artifacts.
pub fn mode_for(cfg: &PipelineConfig, name: ModeName) -> Result<DecodeMode> {
    Ok(match name {
        ModeName::BaseOnly => DecodeMode::BaseOnly,
        ModeName::VanillaKnn => DecodeMode::VanillaKnn,
        ModeName::ArSkip => {
            require(&cfg.paths.estimator_tran, "Tran-λ estimator (run train-ar)")?;
            DecodeMode::ArSkip {
                config: cfg.ar_config(),
                estimator: load_estimator(&cfg.paths.estimator_tran)?,
            }
        }
        ModeName::DrSkip => {
            let (classifier, schedule) = load_skip_classifier(cfg)?;
            DecodeMode::DrSkip {
                classifier,
                schedule,
            }
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TranslateSummary {
    pub mode: String,
    pub sentences: usize,
    pub bleu: BleuScore,
    pub retrieval_rate: f64,
}

pub fn translate_stage(cfg: &PipelineConfig, name: ModeName) -> Result<TranslateSummary> {
    let params = load_base(cfg)?;
    let store = load_domain_store(cfg)?;
    let domain = load_domain(cfg)?;
    let mode = mode_for(cfg, name)?;
    let ctx = EvalContext {
        params: &params,
        store: &store,
        knn: &cfg.knn,
        batch_size: cfg.bench.eval_batch_size,
        par: cfg.parallelism,
    };
    let run = cfg.run_with_workers(|| ctx.decode(&mode, &domain.test))?;
    ensure_parent(&cfg.paths.traces)?;
    save_traces(&run.traces, &cfg.paths.traces)?;
    Ok(TranslateSummary {
        mode: mode.name().to_owned(),
        sentences: run.traces.len(),
        bleu: run_bleu(&run, &domain.test)?,
        retrieval_rate: run.retrieval_count() as f64 / run.token_count().max(1) as f64,
    })
}

pub fn analyze_intervals_stage(cfg: &PipelineConfig) -> Result<IntervalReport> {
    let params = load_base(cfg)?;
    let store = load_domain_store(cfg)?;
    let domain = load_domain(cfg)?;
    let ctx = EvalContext {
        params: &params,
        store: &store,
        knn: &cfg.knn,
        batch_size: cfg.bench.eval_batch_size,
        par: cfg.parallelism,
    };
    let report =
        cfg.run_with_workers(|| interval_analysis(&ctx, &domain.test, cfg.bench.interval_step))?;
    ensure_dir(&cfg.paths.reports_dir)?;
    write_intervals_csv(&report, &cfg.paths.reports_dir.join("intervals.csv"))?;
    write_json(&report, &cfg.paths.reports_dir.join("intervals.json"))?;
    Ok(report)
}

/// Sweep on the validation split, with the classifier and T fixed.
pub fn sweep_alpha_stage(cfg: &PipelineConfig) -> Result<Vec<BenchResult>> {
    let params = load_base(cfg)?;
    let store = load_domain_store(cfg)?;
    let domain = load_domain(cfg)?;
    let (clf, sched) = load_skip_classifier(cfg)?;
    let ctx = EvalContext {
        params: &params,
        store: &store,
        knn: &cfg.knn,
        batch_size: cfg.bench.eval_batch_size,
        par: cfg.parallelism,
    };
    let rows = cfg.run_with_workers(|| {
        alpha_min_sweep(
            &ctx,
            &clf,
            sched.t_mean,
            &cfg.bench.alpha_min_sweep,
            &domain.valid,
        )
    })?;
    ensure_dir(&cfg.paths.reports_dir)?;
    write_report_csv(&rows, &cfg.paths.reports_dir.join("sweep.csv"))?;
    write_json(&rows, &cfg.paths.reports_dir.join("sweep.json"))?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchResult>,
    pub report_csv: PathBuf,
    pub report_md: PathBuf,
}

/// Benchmarks the configured modes on the test split and writes
/// `report.csv` and `report.md` (including any sweep and interval results
/// already on disk).
pub fn bench_stage(cfg: &PipelineConfig) -> Result<BenchSummary> {
    let store = load_domain_store(cfg)?;
    let params = load_base(cfg)?;
    store.check_model(&params)?;
    let domain = load_domain(cfg)?;
    let sets = load_sample_sets(cfg).ok();

    let mut modes = Vec::new();
    let mut f1 = Vec::new();
    for &name in &cfg.bench.modes {
        let mut m = BenchMode::new(mode_for(cfg, name)?);
        if let Some(sets) = &sets {
            match &m.mode {
                DecodeMode::DrSkip {
                    classifier,
                    schedule,
                } => {
                    m.f1 = dr_skip_f1(classifier, schedule, &sets.test)?.f1;
                    f1.push(("dr_skip (classifier)".to_owned(), m.f1));
                }
                DecodeMode::ArSkip { config, estimator } => {
                    m.f1 = ar_skip_f1(estimator, config.alpha, &sets.test)?.f1;
                    for &a in &cfg.ar.alphas {
                        f1.push((
                            format!("ar_skip Tran-λ, α = {a}"),
                            ar_skip_f1(estimator, a, &sets.test)?.f1,
                        ));
                    }
                }
                _ => {}
            }
        }
        modes.push(m);
    }
    let ctx = EvalContext {
        params: &params,
        store: &store,
        knn: &cfg.knn,
        batch_size: cfg.bench.eval_batch_size,
        par: cfg.parallelism,
    };
    let rows = cfg.run_with_workers(|| {
        benchmark(
            &ctx,
            &modes,
            &cfg.bench.batch_sizes,
            &domain.test,
            cfg.bench.repetitions,
        )
    })?;

    ensure_dir(&cfg.paths.reports_dir)?;
    let report_csv = cfg.paths.reports_dir.join("report.csv");
    let report_md = cfg.paths.reports_dir.join("report.md");
    write_report_csv(&rows, &report_csv)?;
    let workers = cfg.run_with_workers(|| current_workers(cfg.parallelism));
    let extras = ReportExtras {
        title: "kNN decoding with retrieval skipping".to_owned(),
        setup: vec![
            ("domain".into(), cfg.active_domain().name.clone()),
            ("datastore rows".into(), store.len().to_string()),
            ("test sentences".into(), domain.test.len().to_string()),
            (
                "k / τ / λ".into(),
                format!(
                    "{} / {} / {}",
                    cfg.knn.k, cfg.knn.temperature, cfg.knn.lambda
                ),
            ),
            ("α_min".into(), cfg.threshold.alpha_min.to_string()),
            ("workers".into(), workers.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
        f1,
        divergence: read_json(&cfg.paths.reports_dir.join("lambda_stats.json")).ok(),
        sweep: read_json(&cfg.paths.reports_dir.join("sweep.json")).unwrap_or_default(),
        intervals: read_json(&cfg.paths.reports_dir.join("intervals.json")).ok(),
    };
    write_report_md(&rows, &extras, &report_md)?;
    Ok(BenchSummary {
        rows,
        report_csv,
        report_md,
    })
}
