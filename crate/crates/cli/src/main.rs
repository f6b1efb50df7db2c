//! `retrocast` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "retrocast", version, about = "Retrieval-augmented time-series forecasting")]
struct Cli {
    /// TOML experiment file; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root of the artifact tree; each configuration writes to `<out>/<hash>/`.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra outputs; `plotdata` writes horizon-versus-error series.
    #[arg(long, global = true, value_parser = ["plotdata"])]
    emit: Vec<String>,
    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the training library and write it to the run directory.
    BuildLibrary {
        /// Also copy the library to this path.
        #[arg(long)]
        library_out: Option<PathBuf>,
    },
    /// Train baseline and fused models for every seed.
    Train,
    /// Evaluate a saved checkpoint on the test split.
    Eval {
        /// Defaults to `model.ckpt` in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// The checkpoint is a baseline model without an auxiliary stream.
        #[arg(long)]
        baseline: bool,
    },
    /// Baseline plus one row per ablation.
    Ablate {
        /// Comma-separated ablation names (default: all).
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
    },
    /// Baseline plus one row per value of a knob.
    Sweep {
        /// alpha, tau, k or clip_quantile.
        #[arg(long, default_value = "alpha")]
        param: String,
        /// Comma-separated values (default: the standard grid for the knob).
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Proxy quality against the true continuation on test windows.
    Quality {
        /// pooled or per-query.
        #[arg(long, default_value = "pooled")]
        corr: String,
    },
}

/// An error with its exit code class.
#[derive(Debug)]
pub struct CliError {
    config: bool,
    message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            config: true,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            config: false,
            message: message.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        self.config
    }
}

impl From<retrocast::Error> for CliError {
    fn from(e: retrocast::Error) -> Self {
        Self {
            config: e.is_config(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level));
    if std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty()) {
        builder.write_style(env_logger::WriteStyle::Never);
    }
    builder.init();
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let cfg = config::resolve(cli.config.as_deref(), &cli.overrides)?;
    let ctx = commands::Context::new(cfg, &cli.out, cli.emit.iter().any(|e| e == "plotdata"))?;
    match cli.command {
        Command::BuildLibrary { library_out } => commands::build_library(&ctx, library_out.as_deref()),
        Command::Train => commands::train(&ctx),
        Command::Eval { checkpoint, baseline } => commands::eval(&ctx, checkpoint.as_deref(), baseline),
        Command::Ablate { rows } => commands::ablate(&ctx, rows.as_deref()),
        Command::Sweep { param, grid } => commands::sweep(&ctx, &param, grid.as_deref()),
        Command::Quality { corr } => commands::quality(&ctx, &corr),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "error": {
                    "kind": if e.is_config() { "config" } else { "runtime" },
                    "message": e.message,
                }
            });
            eprintln!("{record}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
