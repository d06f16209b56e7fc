use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vidyn::{Error, Result};
use vidyn_cli::checkpoint::ModelKind;
use vidyn_cli::config::{Overrides, RunConfig};
use vidyn_cli::{commands, desk, exit_code};

/// Variational recurrent models for dynamical systems with unknown random
/// parameters.
///
/// Every command accepts `--config FILE` (JSON, any subset of keys) and the
/// flags listed under its help; flags win over the file. Each output
/// directory receives the resolved `config.json`.
#[derive(Parser)]
#[command(name = "vidyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Encoder,
    Vi,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Generate {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train an encoder, latent-variable models (one per --lambda) or the baseline.
    Train {
        kind: Kind,
        /// Encoder checkpoint, required for `vi`.
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Monte Carlo forecasts from each --starts origin of every validation trajectory.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// One-step-ahead predictive mixtures over every validation trajectory.
    Onestep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Accuracy and calibration metrics from saved forecast and one-step outputs.
    Evaluate {
        /// Directory written by `forecast`.
        #[arg(long)]
        forecasts: Option<PathBuf>,
        /// Directory written by `onestep`.
        #[arg(long)]
        onestep: Option<PathBuf>,
        /// Label for the report.
        #[arg(long, default_value = "model")]
        name: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// Latent-space analysis of one or more latent-variable checkpoints and the penalty recommendation.
    Latent {
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Full desk-scale pipeline (Mackey-Glass, 60 trajectories of 600 steps) with an acceptance table.
    ReproduceDesk {
        #[command(flatten)]
        o: Overrides,
    },
}

impl Command {
    fn overrides(&self) -> &Overrides {
        match self {
            Command::Generate { o }
            | Command::Train { o, .. }
            | Command::Forecast { o, .. }
            | Command::Onestep { o, .. }
            | Command::Evaluate { o, .. }
            | Command::Latent { o, .. }
            | Command::ReproduceDesk { o } => o,
        }
    }
}

fn run(cmd: Command, cfg: RunConfig) -> Result<()> {
    match cmd {
        Command::Generate { .. } => commands::generate(&cfg).map(drop),
        Command::Train { kind: Kind::Vi, encoder, .. } => {
            let enc = encoder.ok_or_else(|| Error::Usage("train vi requires --encoder".into()))?;
            commands::train_latent(&cfg, &enc).map(drop)
        }
        Command::Train { kind: Kind::Encoder, .. } => commands::train_recurrent(&cfg, ModelKind::Encoder).map(drop),
        Command::Train { kind: Kind::Baseline, .. } => commands::train_recurrent(&cfg, ModelKind::Baseline).map(drop),
        Command::Forecast { checkpoint, .. } => commands::forecast(&cfg, &checkpoint).map(drop),
        Command::Onestep { checkpoint, .. } => commands::onestep(&cfg, &checkpoint).map(drop),
        Command::Evaluate { forecasts, onestep, name, .. } => {
            commands::evaluate(&cfg, forecasts.as_deref(), onestep.as_deref(), &name).map(drop)
        }
        Command::Latent { checkpoint, .. } => commands::latent(&cfg, &checkpoint).map(drop),
        Command::ReproduceDesk { .. } => {
            let table = desk::reproduce(&cfg)?;
            print!("{}", desk::render(&table));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let o = cli.command.overrides().clone();
    let base = match cli.command {
        Command::ReproduceDesk { .. } => RunConfig::desk(),
        _ => RunConfig::default(),
    };
    let result = o.resolve(base).and_then(|cfg| {
        if o.print_config {
            print!("{}", cfg.to_json());
            return Ok(());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(o.threads.unwrap_or(1).max(1))
            .build()
            .map_err(|e| Error::Usage(e.to_string()))?;
        pool.install(|| run(cli.command, cfg))
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
