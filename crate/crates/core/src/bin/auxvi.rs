//! `auxvi run <config>` · `auxvi verify <checkpoint>` · `auxvi selftest`
//!
//! Exit codes: 0 success, 1 validation failure (bad config or checkpoint,
//! violated bound chain, failed self-check), 2 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use auxvi::experiment::{self, CertStatus, ExperimentConfig, RunOptions};
use auxvi::Error;

#[derive(Parser)]
#[command(name = "auxvi", version, about = "Variational inference with auxiliary-variable posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config and write trace, summary, plots and checkpoints.
    Run {
        config: PathBuf,
        /// Override `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Override `output.dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Skip quadrature certification.
        #[arg(long)]
        no_oracle: bool,
    },
    /// Recompute the certified bound chain for a checkpoint.
    Verify { checkpoint: PathBuf },
    /// Run the built-in invariant checks.
    Selftest,
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

fn exit_for(err: &anyhow::Error) -> ExitCode {
    let numerical = err.downcast_ref::<Error>().is_some_and(Error::is_numerical);
    ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION })
}

fn run(config: PathBuf, opts: RunOptions) -> anyhow::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
    cfg.apply(&opts);
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    let summary = experiment::run(cfg)?;

    println!("{} / {} / seed {}", summary.model, summary.estimator, summary.seed);
    println!("steps: {}/{}", summary.steps_completed, summary.steps_requested);
    if let Some(f) = &summary.failure {
        eprintln!("training aborted at step {}: {}", f.step, f.detail);
        eprintln!("partial trace in {}", dir.join("trace.csv").display());
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    if let Some(e) = &summary.final_elbo {
        println!("final ELBO (N = {}): {:.6} ± {:.6}", e.n, e.mean, e.std_error);
    }
    print!("{}", summary.oracle);
    if let Some(d) = summary.equivalence_discrepancy {
        println!("HVM/ADGM discrepancy: {d:.3e}");
    }
    if let (Some(d), Some(multi)) = (&summary.dip, summary.dip_multimodal) {
        println!(
            "dip test: statistic {:.4}, p = {:.4} ({})",
            d.statistic,
            d.p_value,
            if multi { "multimodal" } else { "unimodal" }
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(if summary.oracle.status == CertStatus::Violated {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::SUCCESS
    })
}

fn verify(checkpoint: PathBuf) -> anyhow::Result<ExitCode> {
    let report = experiment::verify(&checkpoint).with_context(|| format!("verifying {}", checkpoint.display()))?;
    print!("{report}");
    Ok(if report.oracle.status == CertStatus::Violated {
        ExitCode::from(EXIT_VALIDATION)
    } else {
        ExitCode::SUCCESS
    })
}

fn selftest() -> ExitCode {
    let results = auxvi::selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {:<40} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{}/{} checks passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VALIDATION)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
            no_oracle,
        } => run(config, RunOptions { seed, out_dir, no_oracle }),
        Command::Verify { checkpoint } => verify(checkpoint),
        Command::Selftest => Ok(selftest()),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        exit_for(&e)
    })
}
