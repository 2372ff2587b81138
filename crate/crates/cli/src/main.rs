//! `curator` binary: curate episodes, run dataset filters, export training
//! examples, report statistics, self-check the editor kernel, and replay
//! episode event logs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Logs are line-delimited JSON on stderr; data goes to stdout or files.

mod commands;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "curator",
    version,
    about = "Agentic curation pipeline for code-rendered VQA data"
)]
struct Cli {
    /// Pipeline configuration file (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Store root; overrides the configured path.
    #[arg(long, global = true)]
    store: Option<PathBuf>,

    /// Concurrent episodes; overrides the configured width.
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    /// Process at most this many inputs.
    #[arg(long, global = true)]
    limit: Option<usize>,

    /// Validate the configuration and render the first instance without any
    /// backend calls.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run solver/editor episodes over a file of VQA instances.
    Curate {
        /// JSONL file of instances.
        #[arg(long)]
        instances: PathBuf,
    },
    /// Dataset quality gates.
    Filter {
        #[command(subcommand)]
        which: FilterCommand,
    },
    /// Standardize stored trajectories into trainset.jsonl.
    Export {
        /// Output file; defaults to <output dir>/trainset.jsonl.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset statistics: action distribution and trajectory shapes.
    Stats {
        /// Output directory; defaults to the configured output dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Numeric self-checks of the embedding-editor kernel.
    KernelSelfcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Random configurations for the gradient check.
        #[arg(long, default_value_t = 5)]
        configs: usize,
        /// Test-harness hook: corrupt one analytic gradient entry so the
        /// check must fail.
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
        /// Write the JSON report here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the stored event log and record of one episode.
    Replay { episode_id: String },
}

#[derive(Debug, Subcommand)]
enum FilterCommand {
    /// Keep instances any expert answers correctly.
    Consensus {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Drop instances the base model answers correctly.
    Rejection {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Accept re-rendered instances any solver still answers correctly.
    Img2code {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Usage or configuration problem: exit 2.
    Config(anyhow::Error),
    /// Runtime failure: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        CliError::Config(e.into())
    }

    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = commands::Globals {
        config: cli.config,
        store: cli.store,
        parallelism: cli.parallelism,
        limit: cli.limit,
        dry_run: cli.dry_run,
    };
    let result = match cli.command {
        Command::Curate { instances } => commands::curate::run(&globals, &instances),
        Command::Filter { which } => match which {
            FilterCommand::Consensus {
                input,
                output,
                report,
            } => commands::filter::run(
                &globals,
                commands::filter::Kind::Consensus,
                &input,
                &output,
                report.as_deref(),
            ),
            FilterCommand::Rejection {
                input,
                output,
                report,
            } => commands::filter::run(
                &globals,
                commands::filter::Kind::Rejection,
                &input,
                &output,
                report.as_deref(),
            ),
            FilterCommand::Img2code {
                input,
                output,
                report,
            } => commands::filter::run(
                &globals,
                commands::filter::Kind::Img2code,
                &input,
                &output,
                report.as_deref(),
            ),
        },
        Command::Export { out } => commands::export::run(&globals, out.as_deref()),
        Command::Stats { out } => commands::stats::run(&globals, out.as_deref()),
        Command::KernelSelfcheck {
            seed,
            configs,
            corrupt_gradient,
            out,
        } => commands::kernel::run(seed, configs, corrupt_gradient, out.as_deref()),
        Command::Replay { episode_id } => commands::replay::run(&globals, &episode_id),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(e)) => {
            logging::error(&format!("{e:#}"));
            ExitCode::from(1)
        }
        Err(CliError::Config(e)) => {
            logging::error(&format!("{e:#}"));
            ExitCode::from(2)
        }
    }
}
