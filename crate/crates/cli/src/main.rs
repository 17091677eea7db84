use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use adabatch_cli::config::{parse_config, Overrides};
use adabatch_cli::experiment::{render_summary, run_experiment, summarize_dir};

/// Batch-size schedule experiment runner.
#[derive(Parser)]
#[command(name = "adabatch", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every variant x seed in a config file and persist metrics.
    Run {
        /// Path to the experiment TOML file.
        config: PathBuf,
        /// Output directory for metrics and summary files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Rebuild the summary table from the metrics files in a directory.
    Summarize { dir: PathBuf },
    /// Run fast built-in consistency checks on the core algorithms.
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, seed, workers } => {
            let overrides = Overrides { out_dir: out, seed, workers };
            parse_config(&config, &overrides).and_then(|spec| {
                run_experiment(&spec)?;
                Ok(())
            })
        }
        Command::Summarize { dir } => summarize_dir(&dir).map(|rows| {
            print!("{}", render_summary(&rows));
        }),
        Command::Check => self_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Quick smoke checks of the numerical core; each line reports one check.
fn self_check() -> Result<()> {
    use adabatch_core::{
        approx_norm_test, make_dataset, round_batch_plan, theorem_condition, DatasetParams,
        Objective, ObjectiveKind, ParamVector, RngStream,
    };

    let mut failed = false;
    let mut check = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
        failed |= !ok;
    };

    let (admissible, threshold) = theorem_condition(0.5, 0.95, 0.1);
    check(
        "admissibility threshold at (beta2, eta) = (0.95, 0.1)",
        admissible && (threshold - 0.52704).abs() < 1e-4,
    );
    let (inadmissible, _) = theorem_condition(0.9, 0.95, 0.1);
    check("beta1 = 0.9 flagged inadmissible", !inadmissible);

    let plan = round_batch_plan(1000, 4, 16, 8192);
    check("rounding cascade 1000 / (4*16) -> 1024", plan.global == 1024 && plan.microbatch == 16);

    let mut rng = RngStream::new(1, 0);
    let grads: Vec<ParamVector> = (0..8)
        .map(|_| ParamVector::new((0..4).map(|_| rng.standard_normal()).collect()))
        .collect();
    let r = approx_norm_test(&grads, 0.9, 1024, false, 1e-12)?;
    check("norm test statistic finite and positive", r.statistic.is_finite() && r.statistic > 0.0);

    let ds = make_dataset(ObjectiveKind::Logistic, 64, 4, 0, &DatasetParams::default())?;
    let obj = Objective::new(ds, 0);
    let w = ParamVector::filled(4, 0.25);
    let g = obj.full_grad(&w)?;
    let fd = obj.finite_diff_grad(&w, 1e-6)?;
    let rel = g.sub(&fd)?.l2_norm() / g.l2_norm().max(1e-12);
    check("logistic gradient matches central differences", rel < 1e-5);

    if failed {
        anyhow::bail!("self-check failed");
    }
    Ok(())
}
