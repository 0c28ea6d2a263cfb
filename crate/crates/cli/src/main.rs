use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use imda_core::harness::{self, selfcheck, ExperimentConfig, RunError};
use imda_core::theory::{self, DiscreteMeasurePair, LabelLoss, TheoryError};
use imda_core::GroundMetric;

const DEFAULT_OUTPUT_DIR: &str = "imda-output";

#[derive(Parser)]
#[command(name = "imda", version, about = "Multi-source domain adaptation with learned domain weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, alpha.csv, ledger.csv and bound.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override one config key, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Gradient, solver, transport and ledger property checks.
    Check {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Exact W1 between two measures of at most 7 atoms each.
    OracleW1 {
        /// Rows `measure,y,x_1,...,x_d` with measure 0 or 1, after a header line.
        csv: PathBuf,
        /// Weight of the feature distance in the ground metric.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, value_enum, default_value_t = Loss::Absolute)]
        loss: Loss,
    },
    /// Recompute the bound from the ledger and metrics of a finished run.
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Loss {
    Absolute,
    ZeroOne,
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

fn run(config: &Path, overrides: &[String]) -> Result<(), RunError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let outcome = harness::run(&cfg)?;
    let dir = output_dir(&cfg);
    harness::write_outputs(&dir, &outcome)?;
    let last = outcome.metrics.last().expect("epoch 0 is always recorded");
    let alpha: Vec<String> = last.alpha.iter().map(|a| format!("{a:.4}")).collect();
    println!("epochs: {}", last.epoch);
    println!("target test accuracy: {:.4}", last.target_test_accuracy);
    println!("alpha: [{}]", alpha.join(", "));
    if let Some(b) = &outcome.bound {
        println!("bound: {}", b.total);
    }
    if outcome.oversized_batches {
        eprintln!("warning: batch size exceeds the smallest set; whole-set batches were used");
    }
    println!("outputs: {}", dir.display());
    Ok(())
}

fn bound(config: &Path, overrides: &[String]) -> Result<(), RunError> {
    let cfg = ExperimentConfig::load(config, overrides)?;
    let report = harness::bound_from_outputs(&cfg, &output_dir(&cfg))?;
    println!("term_name,value");
    for (name, v) in report.rows() {
        println!("{name},{v}");
    }
    Ok(())
}

fn oracle(csv: &Path, scale: f64, loss: Loss) -> Result<(), TheoryError> {
    let pair = DiscreteMeasurePair::read_csv(csv)?;
    let loss = match loss {
        Loss::Absolute => LabelLoss::Absolute,
        Loss::ZeroOne => LabelLoss::ZeroOne,
    };
    let metric = GroundMetric::new(loss, scale)?;
    let (w1, perm) = theory::exact_w1_coupling(&pair, &metric)?;
    println!("w1,{w1}");
    for (i, j) in perm.iter().enumerate() {
        println!("match,{i},{j}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, overrides } => run(&config, &overrides).map_err(|e| (e.to_string(), e.exit_code())),
        Command::Bound { config, overrides } => bound(&config, &overrides).map_err(|e| (e.to_string(), e.exit_code())),
        Command::OracleW1 { csv, scale, loss } => oracle(&csv, scale, loss).map_err(|e| (e.to_string(), 2)),
        Command::Check { seeds } => {
            let outcomes = selfcheck::run_checks(seeds);
            for c in &outcomes {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if outcomes.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(("some checks failed".to_string(), 3))
            }
        }
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err((msg, code)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
