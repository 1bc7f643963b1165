//! Command-line runner for fgakit experiments: synthetic or CIFAR-10 data,
//! contrastive training, attacks, evaluation, transfer and ablation
//! studies. Configs and reports are JSON, matrices CSV.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Clone, Parser)]
#[command(name = "fgakit", version, about = "Feature-guidance adversarial attack experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate (or ingest) the dataset and write the train/test splits.
    GenData,
    /// Train the image and text encoders on the train split.
    Train,
    /// Attack the test split and write the adversarial artifact.
    Attack,
    /// Score clean and adversarial test data.
    Eval,
    /// Train several models and cross-evaluate attacks between them.
    Transfer,
    /// Sweep attack budget and step count.
    Ablate,
    /// Merge report files into one summary.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Train => "train",
            Self::Attack => "attack",
            Self::Eval => "eval",
            Self::Transfer => "transfer",
            Self::Ablate => "ablate",
            Self::Report => "report",
        }
    }
}

/// The config file (or defaults) with command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn execute(command: Command, cfg: &RunConfig) -> CliResult<PathBuf> {
    log::info!("{} -> {}", command.name(), cfg.out.display());
    match command {
        Command::GenData => commands::gen_data(cfg),
        Command::Train => commands::train(cfg),
        Command::Attack => commands::attack(cfg),
        Command::Eval => commands::eval(cfg),
        Command::Transfer => commands::transfer_cmd(cfg),
        Command::Ablate => commands::ablate(cfg),
        Command::Report => commands::report(cfg),
    }
}

/// Runs one invocation and returns the path of the report it wrote.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    let cfg = resolve_config(cli)?;
    match cli.threads {
        None => execute(cli.command, &cfg),
        Some(0) => Err(CliError::Config {
            path: "--threads".into(),
            message: "must be >= 1".into(),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::config(e.to_string()))?
            .install(|| execute(cli.command, &cfg)),
    }
}
