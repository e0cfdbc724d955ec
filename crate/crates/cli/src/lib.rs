//! `mvr`: synthesize data, render views, train, score, evaluate and sweep.

pub mod commands;
pub mod config;
pub mod dataset;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] mvr_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(mvr_core::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(mvr_core::Error::Numeric(_)) => EXIT_NUMERIC,
            CliError::Core(_) => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mvr",
    version,
    about = "Multi-view reconstruction anomaly detection for point clouds"
)]
#[command(after_help = "Any config field can be overridden with --field-name value, e.g. --n-views 9.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic train/test clouds with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Render every cloud of a dataset into view bundles.
    Render {
        #[arg(long)]
        data: PathBuf,
        /// Bundle root; defaults to `<data>/views`.
        #[arg(long)]
        views: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one student per category.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score the test split of a dataset, or a single cloud.
    Infer {
        /// Training output directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, conflicts_with = "cloud")]
        data: Option<PathBuf>,
        #[arg(long, requires = "category")]
        cloud: Option<PathBuf>,
        #[arg(long)]
        category: Option<String>,
        /// Student archive to use instead of `<run>/<category>/final.mvrw`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        views: Option<PathBuf>,
        /// Write a score-colored PLY per cloud.
        #[arg(long)]
        ply: bool,
        /// Write per-view score heatmaps.
        #[arg(long)]
        heatmaps: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compute O-ROC and P-ROC from scores.json.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep rendering resolution, view count or encoder depth.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// One of: resolution, views, depth.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Existing training output to reuse when the axis allows it.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Retrain for every value even when a run could be reused.
        #[arg(long)]
        retrain: bool,
        #[command(flatten)]
        common: Common,
    },
}

/// Splits config-field flags (`--n-views 9`, `--k-pct=0.5`) from the rest.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let fields = config::field_names();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if let Some(flag) = a.strip_prefix("--") {
            let (name, inline) = match flag.split_once('=') {
                Some((n, v)) => (n, Some(v.to_string())),
                None => (flag, None),
            };
            let field = config::flag_to_field(name);
            if fields.contains(&field) {
                let value = match inline {
                    Some(v) => Some(v),
                    None => {
                        i += 1;
                        args.get(i).cloned()
                    }
                };
                if let Some(v) = value {
                    overrides.push((field, v));
                    i += 1;
                    continue;
                }
                rest.push(a.clone());
                i += 1;
                continue;
            }
        }
        rest.push(a.clone());
        i += 1;
    }
    (rest, overrides)
}

fn init_threads() {
    if let Some(n) = std::env::var("MVR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs the CLI on full argv and returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    init_threads();
    let (rest, overrides) = split_overrides(&args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mvr: {e}");
            e.exit_code()
        }
    }
}
