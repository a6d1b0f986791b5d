//! Subcommands of the `addlab` binary.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use addlab::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "addlab", version, about = "Adversarial diffusion distillation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact of the command.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only warnings and errors on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic dataset.
    GenData(Common),
    /// Pretrain the noise-prediction teacher.
    TrainTeacher(Common),
    /// Pretrain the frozen feature network.
    TrainFeatnet(Common),
    /// Distill the teacher into a few-step student.
    Distill(Common),
    /// Archive student samples over a grid of step counts, conditions and seeds.
    Sample(Common),
    /// Write a metric report for one checkpoint.
    Eval(Common),
    /// Judge contestants pairwise and rank them.
    Elo(Common),
    /// Distill and evaluate once per value of one config axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Runs executed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Consolidate finished runs into a table and plots.
    Report {
        /// Run directories to include.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
}

impl Command {
    pub fn quiet(&self) -> bool {
        match self {
            Command::GenData(c)
            | Command::TrainTeacher(c)
            | Command::TrainFeatnet(c)
            | Command::Distill(c)
            | Command::Sample(c)
            | Command::Eval(c)
            | Command::Elo(c) => c.quiet,
            Command::Ablate { common, .. } => common.quiet,
            Command::Report { quiet, .. } => *quiet,
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c),
        Command::TrainTeacher(c) => commands::train_teacher(&c),
        Command::TrainFeatnet(c) => commands::train_featnet(&c),
        Command::Distill(c) => commands::distill(&c),
        Command::Sample(c) => commands::sample(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Elo(c) => commands::elo(&c),
        Command::Ablate { common, jobs } => commands::ablate(&common, jobs),
        Command::Report { runs, out, .. } => report::report(&runs, &out).map(|_| ()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Input(e.to_string()))?;
    run(cli)
}

/// Process exit status for a command result.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) if e.is_numerical() => 3,
        Err(_) => 2,
    }
}
