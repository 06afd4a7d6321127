//! `hvae-ood`: train hierarchical VAEs, score datasets with likelihood-ratio
//! OOD scores, and run the supporting analyses.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{DatasetRef, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "hvae-ood", version, about = "Likelihood-ratio OOD detection with hierarchical VAEs")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory override.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `model.ckpt` and `train_log.csv`.
    Train,
    /// Write a score table per dataset (`name` or `name:split`).
    Score { datasets: Vec<String> },
    /// Compare an in-distribution and an OOD score table.
    Report { in_csv: PathBuf, out_csv: PathBuf },
    /// Write inputs and their latent reconstructions as PGM images.
    Reconstruct,
    /// Supporting analyses.
    Analyze {
        #[command(subcommand)]
        which: Analysis,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Closed-form expected inverse volume over a dimension sweep.
    JacobianSweep,
    /// Cross-model correlation of posterior means.
    Correlate,
    /// Estimator variances of the ELBO, `L^{>k}` and their difference.
    Variance,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.out_dir.as_deref())?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Score { datasets } => {
            let refs = datasets.iter().map(|d| DatasetRef::parse(d)).collect::<anyhow::Result<Vec<_>>>()?;
            commands::score(&cfg, &refs)
        }
        Command::Report { in_csv, out_csv } => commands::report(&cfg, &in_csv, &out_csv).map(drop),
        Command::Reconstruct => commands::reconstruct_cmd(&cfg).map(drop),
        Command::Analyze { which } => match which {
            Analysis::JacobianSweep => commands::jacobian_sweep(&cfg).map(drop),
            Analysis::Correlate => commands::correlate(&cfg).map(drop),
            Analysis::Variance => commands::variance(&cfg).map(drop),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
