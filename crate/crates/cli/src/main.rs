//! Command-line front end: run experiments from a JSON config, dump
//! augmentations for audit, or run the built-in self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selftrain_core::harness::{
    self, run_augment_dump, run_experiment, selector_from_name, selfcheck, ExperimentConfig,
    Variant,
};

#[derive(Parser)]
#[command(
    name = "selftrain",
    about = "Semi-supervised self-training for few-shot text tasks",
    version
)]
struct Cli {
    /// Worker threads (falls back to the ST_WORKERS environment variable,
    /// then to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Pipeline variants to run (repeatable); overrides the config.
        #[arg(long = "variant")]
        variants: Vec<String>,
        /// Selector policies to run (repeatable); overrides the config.
        #[arg(long = "selector")]
        selectors: Vec<String>,
        /// Output directory for reports; overrides the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the prerequisites and write the augmentation dump only.
    Augment {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the dump.
        #[arg(long, default_value = "augmentations")]
        out: PathBuf,
    },
    /// Run the gradient and distribution self-test suite.
    Check,
}

fn run(cli: Cli) -> selftrain_core::Result<bool> {
    harness::init_worker_pool(cli.workers)?;
    match cli.command {
        Command::Run {
            config,
            variants,
            selectors,
            out,
        } => {
            let mut config = ExperimentConfig::from_file(&config)?;
            if !variants.is_empty() {
                config.variants = variants
                    .iter()
                    .map(|v| Variant::from_name(v))
                    .collect::<selftrain_core::Result<Vec<_>>>()?;
            }
            if !selectors.is_empty() {
                config.selectors = selectors
                    .iter()
                    .map(|s| selector_from_name(s))
                    .collect::<selftrain_core::Result<Vec<_>>>()?;
            }
            if let Some(out) = out {
                config.output_dir = Some(out);
            }
            let report = run_experiment(&config)?;
            println!(
                "task={} labeled_fraction={} seeds={:?}",
                report.task, report.labeled_fraction, report.seeds
            );
            for row in &report.rows {
                let mut line = format!("variant={} selector={}", row.variant, row.selector);
                for (metric, summary) in &row.metrics {
                    match summary.std {
                        Some(std) => {
                            line.push_str(&format!(" {metric}={:.4}±{:.4}", summary.mean, std))
                        }
                        None => line.push_str(&format!(" {metric}={:.4}", summary.mean)),
                    }
                }
                println!("{line}");
            }
            for failure in &report.failures {
                eprintln!(
                    "failed: variant={} selector={} seed={}: {}",
                    failure.variant, failure.selector, failure.seed, failure.message
                );
            }
            if let Some(dir) = &config.output_dir {
                println!("reports written to {}", dir.display());
            }
            Ok(report.failures.is_empty())
        }
        Command::Augment { config, out } => {
            let config = ExperimentConfig::from_file(&config)?;
            let path = run_augment_dump(&config, &out)?;
            println!("augmentation dump written to {}", path.display());
            Ok(true)
        }
        Command::Check => {
            let results = selfcheck::run_all();
            Ok(selfcheck::print_and_tally(&results))
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
