use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use trevsnn_cli::commands;
use trevsnn_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "trevsnn",
    version,
    about = "Temporal-reversible spiking network trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut run = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            run.seed = s;
        }
        if let Some(o) = &self.out {
            run.out_dir = o.clone();
        }
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, timing.csv and model.ckpt.
    Train(Common),
    /// Test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Reversible/STBP equivalence and finite differences.
    Gradcheck(Common),
    /// Activation ledger peaks across timestep counts.
    Memcheck(Common),
    /// Firing rates and the MAC/AC energy estimate.
    Energy {
        #[command(flatten)]
        common: Common,
        /// Untrained weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient cosine similarity of baseline, case 1 and case 2 training.
    Analyze(Common),
}

fn run(cli: Cli) -> Result<ExitCode> {
    let code = match cli.command {
        Command::Train(c) => {
            let s = commands::train(&c.load()?)?;
            if s.diverged.is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Eval { common, checkpoint } => {
            commands::eval(&common.load()?, &checkpoint)?;
            ExitCode::SUCCESS
        }
        Command::Gradcheck(c) => {
            if commands::gradcheck(&c.load()?)?.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Memcheck(c) => {
            if commands::memcheck(&c.load()?)?.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Energy { common, checkpoint } => {
            commands::energy(&common.load()?, checkpoint.as_deref()).context("energy estimate")?;
            ExitCode::SUCCESS
        }
        Command::Analyze(c) => {
            commands::analyze(&c.load()?)?;
            ExitCode::SUCCESS
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
