mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::Overrides;

/// Confidence-gated multi-model evaluation runs.
#[derive(Debug, Parser)]
#[command(name = "cure", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one pipeline variant over a dataset sample.
    Run {
        #[command(flatten)]
        common: Common,
        /// Rerun the experiment recorded in a previous run's manifest.json.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Run several variants over the same sample and compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated modes (zero-shot, single-cot, full). Default: all.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        modes: Option<Vec<String>>,
        /// Render the comparison from the shipped recorded results instead.
        #[arg(long)]
        fixture: bool,
    },
    /// Build comparison tables from finished run directories.
    Report {
        /// Run directories written by `run` or `ablate`.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Start from the shipped reference rows and recorded results.
        #[arg(long)]
        fixture: bool,
    },
    /// Print a frozen template or a normalized dataset.
    Inspect {
        /// `templates` or `dataset`.
        what: String,
        /// Template name (confidence, synthesis, direct, cot).
        name: Option<String>,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        format: Option<String>,
    },
}

#[derive(Debug, Args, Default)]
struct Common {
    /// TOML config file; also read from CURE_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark kind: MedQA, MedMCQA or PubMedQA.
    #[arg(long)]
    dataset: Option<String>,
    /// Path of the dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset file layout: published or normalized.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    sample_n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// zero-shot, single-cot or full.
    #[arg(long)]
    mode: Option<String>,
    /// Mock script; no network calls are made when set.
    #[arg(long)]
    mock: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset.clone(),
            data: self.data.clone(),
            format: self.format.clone(),
            sample_n: self.sample_n,
            seed: self.seed,
            mode: self.mode.clone(),
            mock: self.mock.clone(),
            concurrency: self.concurrency,
            max_retries: self.max_retries,
            out: self.out.clone(),
            cache: self.cache.clone(),
        }
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

async fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, manifest } => {
            commands::run(
                common.config.as_deref(),
                &common.overrides(),
                manifest.as_deref(),
            )
            .await
        }
        Command::Ablate {
            common,
            modes,
            fixture,
        } => {
            if fixture {
                let out = common
                    .out
                    .ok_or_else(|| Failure::config(anyhow::anyhow!("--fixture needs --out")))?;
                return commands::ablate_fixture(&out);
            }
            commands::ablate(common.config.as_deref(), &common.overrides(), modes).await
        }
        Command::Report { runs, out, fixture } => commands::report(&runs, &out, fixture),
        Command::Inspect {
            what,
            name,
            dataset,
            data,
            format,
        } => commands::inspect(&what, name.as_deref(), dataset, data, format),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
