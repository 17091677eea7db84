//! Experiment execution and metrics persistence.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use adabatch_core::{run_training, RunMetrics, StepRecord, TrainConfig};

use crate::config::ExperimentSpec;

pub const METRICS_HEADER: &str =
    "step,samples,batch_size,lr,train_loss,grad_norm,test_statistic,val_loss,elapsed_seconds";

/// One line of the run-level comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scheme: String,
    pub seed: Option<u64>,
    pub steps: f64,
    pub avg_batch_size: f64,
    pub elapsed_seconds: Option<f64>,
    pub best_train_loss: f64,
    pub best_val_loss: f64,
}

#[derive(Debug)]
pub struct CompletedRun {
    pub variant: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub summary: SummaryRow,
    pub metrics_path: PathBuf,
}

/// Runs every variant x seed, persisting per-step metrics and a summary
/// table under the spec's output directory. Individual run failures are
/// reported and skipped; an error is returned at the end iff any run failed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<CompletedRun>> {
    std::fs::create_dir_all(&spec.out_dir)
        .with_context(|| format!("cannot create {}", spec.out_dir.display()))?;
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (name, base_cfg) in &spec.variants {
        for &seed in &spec.seeds {
            let mut cfg: TrainConfig = base_cfg.clone();
            cfg.seed = seed;
            match run_training(&cfg) {
                Ok(metrics) => {
                    let path = spec.out_dir.join(format!("{name}_seed{seed}.csv"));
                    emit_metrics(&metrics, &path)?;
                    let summary = summary_row(name, Some(seed), &metrics);
                    println!(
                        "{name} seed {seed}: {} steps, {} samples, {:.2}s",
                        metrics.total_steps, metrics.total_samples, metrics.elapsed_seconds
                    );
                    completed.push(CompletedRun {
                        variant: name.clone(),
                        seed,
                        metrics,
                        summary,
                        metrics_path: path,
                    });
                }
                Err(e) => {
                    eprintln!("{name} seed {seed}: FAILED: {e}");
                    failures.push(format!("{name} seed {seed}: {e}"));
                }
            }
        }
    }
    if !completed.is_empty() {
        let rows = summarize(&completed);
        let table_path = spec.out_dir.join("summary.csv");
        write_summary(&rows, &table_path)?;
        print!("{}", render_summary(&rows));
    }
    if !failures.is_empty() {
        bail!("{} run(s) failed:\n{}", failures.len(), failures.join("\n"));
    }
    Ok(completed)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// Writes the per-step metrics stream as delimited text, one row per step.
/// Per-step wall-clock cells are left empty so output is reproducible
/// byte-for-byte; run-level elapsed time is reported on stdout and in the
/// summary table instead.
pub fn emit_metrics(metrics: &RunMetrics, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in &metrics.records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},",
            r.step,
            r.samples,
            r.batch_size,
            r.lr,
            r.train_loss,
            r.grad_norm,
            fmt_opt(r.test_statistic),
            fmt_opt(r.val_loss),
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Reads a metrics file back into step records (inverse of [`emit_metrics`]).
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty metrics file")?;
    if header != METRICS_HEADER {
        bail!("unexpected metrics header in {}: {header}", path.display());
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            bail!("line {} of {} has {} columns", i + 2, path.display(), cols.len());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            Ok(if s.is_empty() { None } else { Some(s.parse()?) })
        };
        records.push(StepRecord {
            step: cols[0].parse()?,
            samples: cols[1].parse()?,
            batch_size: cols[2].parse()?,
            lr: cols[3].parse()?,
            train_loss: cols[4].parse()?,
            grad_norm: cols[5].parse()?,
            test_statistic: opt(cols[6])?,
            val_loss: opt(cols[7])?,
            full_grad_norm: None,
            recheck_statistic: None,
        });
    }
    Ok(records)
}

fn summary_row(scheme: &str, seed: Option<u64>, metrics: &RunMetrics) -> SummaryRow {
    let steps = metrics.total_steps as f64;
    SummaryRow {
        scheme: scheme.to_string(),
        seed,
        steps,
        avg_batch_size: metrics.total_samples as f64 / steps.max(1.0),
        elapsed_seconds: Some(metrics.elapsed_seconds),
        best_train_loss: metrics
            .records
            .iter()
            .map(|r| r.train_loss)
            .fold(f64::INFINITY, f64::min),
        best_val_loss: metrics
            .records
            .iter()
            .filter_map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min),
    }
}

/// Builds one row per (variant, seed) plus a seed-averaged row per variant.
pub fn summarize(runs: &[CompletedRun]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    let mut variants: Vec<&str> = runs.iter().map(|r| r.variant.as_str()).collect();
    variants.dedup();
    for variant in variants {
        let group: Vec<&CompletedRun> = runs.iter().filter(|r| r.variant == variant).collect();
        for run in &group {
            rows.push(run.summary.clone());
        }
        if group.len() > 1 {
            let k = group.len() as f64;
            let mean = |f: &dyn Fn(&SummaryRow) -> f64| {
                group.iter().map(|r| f(&r.summary)).sum::<f64>() / k
            };
            rows.push(SummaryRow {
                scheme: format!("{variant} (mean)"),
                seed: None,
                steps: mean(&|s| s.steps),
                avg_batch_size: mean(&|s| s.avg_batch_size),
                elapsed_seconds: Some(mean(&|s| s.elapsed_seconds.unwrap_or(0.0))),
                best_train_loss: mean(&|s| s.best_train_loss),
                best_val_loss: mean(&|s| s.best_val_loss),
            });
        }
    }
    rows
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>6} {:>8} {:>10} {:>9} {:>12} {:>12}\n",
        "scheme", "seed", "steps", "avg bsz", "time (s)", "train loss", "val loss"
    ));
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        let time = r
            .elapsed_seconds
            .map(|t| format!("{t:.2}"))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<24} {:>6} {:>8.1} {:>10.1} {:>9} {:>12.5} {:>12.5}\n",
            r.scheme, seed, r.steps, r.avg_batch_size, time, r.best_train_loss, r.best_val_loss
        ));
    }
    out
}

fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from(
        "scheme,seed,steps,avg_batch_size,elapsed_seconds,best_train_loss,best_val_loss\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scheme,
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
            r.steps,
            r.avg_batch_size,
            r.elapsed_seconds.map(|t| format!("{t:.3}")).unwrap_or_default(),
            r.best_train_loss,
            r.best_val_loss,
        )?;
    }
    std::fs::write(path, out).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Recomputes summary rows from the metrics files in a run directory.
/// Elapsed time is not recoverable from the files and is left blank.
pub fn summarize_dir(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|f| f != "summary.csv")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no metrics files in {}", dir.display());
    }
    let mut rows = Vec::new();
    for path in paths {
        let records = read_metrics(&path)?;
        let name = path.file_stem().unwrap().to_string_lossy().into_owned();
        let metrics = RunMetrics {
            total_steps: records.len() as u64,
            total_samples: records.last().map_or(0, |r| r.samples),
            records,
            elapsed_seconds: 0.0,
        };
        let mut row = summary_row(&name, None, &metrics);
        row.elapsed_seconds = None;
        rows.push(row);
    }
    Ok(rows)
}
