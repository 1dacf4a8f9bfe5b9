//! Experiment harness behind the `akd` binary: TOML configs, run
//! directories, metrics reports and analysis tables.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{config_hash, ExperimentConfig, Loaded};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "akd", version, about = "Adversarial knowledge distillation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the teacher (or every ensemble member).
    TrainTeacher(RunArgs),
    /// Train the student against the saved teachers.
    TrainStudent(RunArgs),
    /// Write clean and robust accuracy reports for every trained model.
    Evaluate(RunArgs),
    /// Write difficulty, trajectory and entropy tables from per-epoch snapshots.
    Analyze(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::TrainTeacher(a) | Command::TrainStudent(a) | Command::Evaluate(a) | Command::Analyze(a) => a,
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let args = cli.command.args();
    let loaded = config::load(&args.config, args.output_dir.as_deref())?;
    match &cli.command {
        Command::TrainTeacher(_) => commands::train_teacher(&loaded),
        Command::TrainStudent(_) => commands::train_student(&loaded),
        Command::Evaluate(_) => commands::evaluate_models(&loaded),
        Command::Analyze(_) => commands::analyze(&loaded),
    }
}
