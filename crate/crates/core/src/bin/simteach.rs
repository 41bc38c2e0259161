//! Command-line driver for the explanation-example pipeline.
//!
//! Exit codes: 0 on success, 2 on invalid configuration, 3 when an upstream
//! artifact is missing, 1 on any other failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use simteach::error::Error;
use simteach::eval::pipeline as stages;
use simteach::eval::ExperimentConfig;
use simteach::synthdata::UserKind;

#[derive(Parser)]
#[command(name = "simteach", version, about = "Train a small classifier, discover concepts, fit simulated users, select explanation examples, and measure simulatability")]
struct Cli {
    /// JSON experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    GenData,
    /// Train the target classifier on the generated dataset.
    TrainTarget,
    /// Discover the concept bank and reconstruction map.
    Concepts,
    /// Fit one simulated user's expertise vector.
    FitUser {
        /// color_user or shape_user (defaults to the configured user).
        #[arg(long)]
        user: Option<String>,
    },
    /// Write the saliency cache and per-strategy ranking CSVs.
    Select {
        /// Keep only the top K entries of each ranking.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Sweep all configured strategies over the budget grid.
    Sweep,
    /// Compare matched and mismatched example selection.
    MatchedMismatched,
    /// Re-render the curve chart from results.csv.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => stages::stage_gen_data(&cfg),
        Command::TrainTarget => stages::stage_train_target(&cfg),
        Command::Concepts => stages::stage_concepts(&cfg),
        Command::FitUser { user } => {
            let kind = match user {
                Some(name) => UserKind::parse(name)?,
                None => cfg.user_kind,
            };
            stages::stage_fit_user(&cfg, kind)
        }
        Command::Select { k } => stages::stage_select(&cfg, *k),
        Command::Sweep => stages::stage_sweep(&cfg),
        Command::MatchedMismatched => stages::stage_matched_mismatched(&cfg),
        Command::Report => stages::stage_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::MissingArtifact(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}
