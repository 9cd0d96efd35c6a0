//! Command-line driver for the distillation pipeline.
//!
//! Exit codes: 0 success, 2 usage, 3 file, 4 contract, 5 integrity.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Workspace};
use config::ExperimentConfig;
use dih_core::train::Mode;

#[derive(Parser)]
#[command(name = "dih", version, about = "Distillation via intermediate classifier heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the [output] dir field.
    #[arg(long)]
    out_dir: Option<String>,
    /// Overrides the [output] seeds field (comma-separated).
    #[arg(long)]
    seed_list: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/test dataset files and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also export the splits as CSV for inspection.
        #[arg(long)]
        csv: bool,
    },
    /// Train the teacher with plain cross-entropy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Attach heads to the frozen teacher and fit them.
    FitHeads {
        #[command(flatten)]
        common: Common,
    },
    /// Train one student per seed under the chosen mode.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Training mode: CE, KD, DIH, or ENSEMBLE.
        #[arg(long)]
        mode: String,
    },
    /// Emit the entropy/KL table and the correctness region counts.
    Analyze {
        #[command(flatten)]
        common: Common,
    },
    /// Train one student per on/off member mask.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated 0/1 mask strings; defaults to the full grid.
        #[arg(long)]
        masks: Option<String>,
    },
}

fn load_workspace(common: &Common) -> Result<Workspace, CliError> {
    let text = fs::read_to_string(&common.config).map_err(|e| {
        CliError::File(format!("cannot read config {}: {e}", common.config.display()))
    })?;
    let mut config = ExperimentConfig::parse(&text)?;
    if let Some(dir) = &common.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(seeds) = &common.seed_list {
        config.seeds = config::parse_u64_list(seeds)
            .map_err(|e| CliError::Usage(format!("--seed-list: {e}")))?;
        if config.seeds.is_empty() {
            return Err(CliError::Usage("--seed-list must name at least one seed".into()));
        }
    }
    Ok(Workspace::new(config))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenData { common, csv } => commands::cmd_gen_data(&load_workspace(common)?, *csv),
        Command::TrainTeacher { common } => commands::cmd_train_teacher(&load_workspace(common)?),
        Command::FitHeads { common } => commands::cmd_fit_heads(&load_workspace(common)?),
        Command::Distill { common, mode } => {
            let mode = Mode::parse(mode).map_err(|e| CliError::Usage(e.to_string()))?;
            commands::cmd_distill(&load_workspace(common)?, mode)
        }
        Command::Analyze { common } => commands::cmd_analyze(&load_workspace(common)?),
        Command::Ablate { common, masks } => {
            commands::cmd_ablate(&load_workspace(common)?, masks.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
