//! `report.csv`, `report.md` and `intervals.csv`.
//!
//! report.csv columns, in order: mode, batch_size, alpha_min, tok_per_sec,
//! retrieval_rate, bleu, brevity_penalty, p1, p2, p3, p4, f1, tokens,
//! retrievals, repetitions, workers. Empty cells mean "not applicable".

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::{BenchResult, IntervalReport};
use crate::ar::DivergenceStats;
use crate::error::{Error, Result};

#[derive(Serialize)]
struct CsvRow<'a> {
    mode: &'a str,
    batch_size: usize,
    alpha_min: Option<f64>,
    tok_per_sec: f64,
    retrieval_rate: f64,
    bleu: f64,
    brevity_penalty: f64,
    p1: f64,
    p2: f64,
    p3: f64,
    p4: f64,
    f1: Option<f64>,
    tokens: usize,
    retrievals: usize,
    repetitions: usize,
    workers: usize,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::State(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_report_csv(rows: &[BenchResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let p = r.bleu.precisions;
        w.serialize(CsvRow {
            mode: &r.mode,
            batch_size: r.batch_size,
            alpha_min: r.alpha_min,
            tok_per_sec: r.tok_per_sec,
            retrieval_rate: r.retrieval_rate,
            bleu: r.bleu.score,
            brevity_penalty: r.bleu.brevity_penalty,
            p1: p[0],
            p2: p[1],
            p3: p[2],
            p4: p[3],
            f1: r.f1,
            tokens: r.tokens,
            retrievals: r.retrievals,
            repetitions: r.repetitions,
            workers: r.workers,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct IntervalCsvRow {
    #[serde(rename = "R")]
    r: usize,
    eligible_count: usize,
    bleu: f64,
    delta_bleu: f64,
}

/// Columns: R, eligible_count, bleu, delta_bleu. Omitted intervals are not
/// written.
pub fn write_intervals_csv(report: &IntervalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in &report.rows {
        w.serialize(IntervalCsvRow {
            r: row.r,
            eligible_count: row.eligible_count,
            bleu: row.bleu,
            delta_bleu: row.delta_bleu,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Optional sections appended to report.md.
#[derive(Clone, Debug, Default)]
pub struct ReportExtras {
    pub title: String,
    /// Free-form `key: value` lines shown under the title.
    pub setup: Vec<(String, String)>,
    /// Teacher-forced conduct-class F1 per skipping method.
    pub f1: Vec<(String, Option<f64>)>,
    pub divergence: Option<DivergenceStats>,
    pub sweep: Vec<BenchResult>,
    pub intervals: Option<IntervalReport>,
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.digits$}"))
}

pub fn write_report_md(rows: &[BenchResult], extras: &ReportExtras, path: &Path) -> Result<()> {
    let mut md = String::new();
    let title = if extras.title.is_empty() {
        "Benchmark report"
    } else {
        &extras.title
    };
    let _ = writeln!(md, "# {title}\n");
    for (k, v) in &extras.setup {
        let _ = writeln!(md, "- {k}: {v}");
    }
    if !extras.setup.is_empty() {
        md.push('\n');
    }

    let _ = writeln!(md, "## Decoding\n");
    let _ = writeln!(
        md,
        "| Mode | Batch | BLEU | Retrieval rate | #Tok/Sec | vs vanilla |"
    );
    let _ = writeln!(md, "|---|---:|---:|---:|---:|---:|");
    for r in rows {
        let vanilla = rows
            .iter()
            .find(|v| v.mode == "vanilla_knn" && v.batch_size == r.batch_size)
            .map(|v| r.tok_per_sec / v.tok_per_sec);
        let _ = writeln!(
            md,
            "| {} | {} | {:.2} | {:.3} | {:.1} | {} |",
            r.mode,
            r.batch_size,
            r.bleu.score,
            r.retrieval_rate,
            r.tok_per_sec,
            vanilla.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.2}x"))
        );
    }
    if let Some(r) = rows.first() {
        let _ = writeln!(
            md,
            "\nMedian of {} timed repetitions after one warm-up pass; {} worker(s).",
            r.repetitions, r.workers
        );
    }

    if !extras.f1.is_empty() {
        let _ = writeln!(md, "\n## Teacher-forced skip F1 (conduct class)\n");
        let _ = writeln!(md, "| Method | F1 |");
        let _ = writeln!(md, "|---|---:|");
        for (name, f1) in &extras.f1 {
            let _ = writeln!(md, "| {name} | {} |", opt(*f1, 4));
        }
    }

    if let Some(d) = &extras.divergence {
        let _ = writeln!(md, "\n## Tran-λ vs Bina-λ\n");
        let _ = writeln!(md, "- timesteps: {}", d.count);
        let _ = writeln!(md, "- mean |λ̂_bina − λ̂_tran|: {:.4}", d.mean_abs_diff);
        let _ = writeln!(md, "- fraction with difference > 0.2: {:.4}", d.frac_gt_02);
    }

    if !extras.sweep.is_empty() {
        let _ = writeln!(md, "\n## α_min sweep\n");
        let _ = writeln!(md, "| α_min | BLEU | Retrieval rate | #Tok/Sec |");
        let _ = writeln!(md, "|---:|---:|---:|---:|");
        for r in &extras.sweep {
            let _ = writeln!(
                md,
                "| {} | {:.2} | {:.3} | {:.1} |",
                opt(r.alpha_min, 2),
                r.bleu.score,
                r.retrieval_rate,
                r.tok_per_sec
            );
        }
    }

    if let Some(iv) = &extras.intervals {
        let _ = writeln!(md, "\n## Retrieval benefit by timestep interval\n");
        let _ = writeln!(md, "| Interval | Eligible | BLEU | Δ vs previous |");
        let _ = writeln!(md, "|---|---:|---:|---:|");
        for row in &iv.rows {
            let _ = writeln!(
                md,
                "| [0, {}] | {} | {:.2} | {:+.2} |",
                row.r, row.eligible_count, row.bleu, row.delta_bleu
            );
        }
        for (r, n) in &iv.omitted {
            let _ = writeln!(md, "\n[0, {r}] omitted: only {n} eligible sentences.");
        }
    }
    std::fs::write(path, md).map_err(|e| Error::io(path, e))
}
