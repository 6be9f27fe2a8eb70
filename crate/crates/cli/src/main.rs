mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recal::confidence::ScoreKind;
use recal::correctness::Metric;
use recal::local::BackoffPolicy;

/// Confidence scoring and calibration for code-revision generation traces.
#[derive(Debug, Parser)]
#[command(name = "recal", version)]
pub struct Cli {
    /// Log level (error, warn, info, debug); overrides RECAL_LOG.
    #[arg(long, global = true)]
    pub log_level: Option<log::LevelFilter>,
    /// Worker threads for parallel steps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    #[value(name = "sl_norm", alias = "sl-norm")]
    SlNorm,
    Avg,
    Min,
    #[value(name = "low_k", alias = "low-k")]
    LowK,
    #[value(name = "attn_w", alias = "attn-w")]
    AttnW,
}

impl From<KindArg> for ScoreKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SlNorm => ScoreKind::SlNorm,
            KindArg::Avg => ScoreKind::Avg,
            KindArg::Min => ScoreKind::Min,
            KindArg::LowK => ScoreKind::LowK,
            KindArg::AttnW => ScoreKind::AttnW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Em,
    #[value(alias = "ep_plus")]
    EpPlus,
    Cp,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Em => Metric::Em,
            MetricArg::EpPlus => Metric::EpPlus,
            MetricArg::Cp => Metric::Cp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackoffArg {
    Global,
    Uncalibrated,
}

impl From<BackoffArg> for BackoffPolicy {
    fn from(b: BackoffArg) -> Self {
        match b {
            BackoffArg::Global => BackoffPolicy::Global,
            BackoffArg::Uncalibrated => BackoffPolicy::Uncalibrated,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute a confidence score for every trace.
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long = "score", value_enum)]
        kind: KindArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a binary correctness label for every trace.
    Labels {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a global Platt calibrator.
    FitGlobal {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        l2: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit cluster-local Platt calibrators.
    FitLocal(FitLocalArgs),
    /// Apply a fitted global or local model to scores.
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        /// Traces with embeddings; required for local models.
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate calibrated probabilities against labels.
    Eval {
        #[arg(long)]
        calibrated: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
        /// Per-bin reliability table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Distribution statistics of scores split by correctness.
    Stats {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Traces for per-sequence token-probability skewness.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search local-calibration hyperparameters on a validation split.
    GridSearch(GridSearchArgs),
    /// Write a seeded synthetic trace file.
    Synth {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct FitLocalArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub min_cluster_size: usize,
    #[arg(long, default_value_t = 20)]
    pub min_samples: usize,
    #[arg(long, value_enum, default_value_t = BackoffArg::Global)]
    pub backoff: BackoffArg,
    /// Projection dimension.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub l2: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Share of the training file held out for validation, chosen by id hash.
    #[arg(long, default_value_t = 0.2)]
    pub valid_frac: f64,
    /// Separate validation traces; replaces the hash split when given.
    #[arg(long, requires_all = ["valid_scores", "valid_labels"])]
    pub valid_traces: Option<PathBuf>,
    #[arg(long)]
    pub valid_scores: Option<PathBuf>,
    #[arg(long)]
    pub valid_labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![50, 75, 100, 125, 150])]
    pub min_cluster_sizes: Vec<usize>,
    #[arg(long = "min-samples", value_delimiter = ',', default_values_t = vec![5, 20, 35, 50, 65, 80])]
    pub min_samples: Vec<usize>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![BackoffArg::Global, BackoffArg::Uncalibrated])]
    pub backoffs: Vec<BackoffArg>,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 1.0)]
    pub l2: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the winning model, refit on the training split.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
}

/// Result of a subcommand that did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// Some records were skipped; complete records were written.
    Partial,
    /// The evaluation collapsed into one bin; the report was written.
    Degenerate,
}

fn init_logging(level: Option<log::LevelFilter>) {
    let mut builder = env_logger::Builder::new();
    builder.filter_level(log::LevelFilter::Warn);
    if let Ok(filters) = std::env::var("RECAL_LOG") {
        builder.parse_filters(&filters);
    }
    if let Some(level) = level {
        builder.filter_level(level);
    }
    builder.format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_level);
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::error!("cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Ok(Outcome::Degenerate) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
