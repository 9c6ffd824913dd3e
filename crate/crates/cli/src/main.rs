mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use survfuse::coxph::Ties;
use survfuse::datamodel::Endpoint;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or input files (exit 1).
    #[error("{0}")]
    Config(String),
    /// Some inputs of a batch failed; the rest were processed (exit 2).
    #[error("{failed} of {total} inputs failed")]
    Partial { failed: usize, total: usize },
    /// Failure while computing (exit 3).
    #[error(transparent)]
    Runtime(#[from] survfuse::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Partial { .. } => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Master seed (defaults to the config's seed, or 0)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "survfuse", version, about = "Multimodal survival modelling with late fusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    /// Cohort CSV holding the outcome columns
    #[arg(long)]
    pub outcomes: PathBuf,
    #[arg(long, default_value = "os")]
    pub endpoint: Endpoint,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment tissue and extract tiles from every PNG/TIFF image in a directory
    PrepWsi {
        image_dir: PathBuf,
        /// Minimum tissue fraction for a tile to be kept
        #[arg(long, default_value_t = 0.5)]
        min_tissue: f64,
        /// Fixed saturation threshold instead of Otsu
        #[arg(long)]
        threshold: Option<u8>,
        /// Only write tile coordinates, not tile images
        #[arg(long)]
        no_images: bool,
    },
    /// Five-fold cross-validation with fusion and evaluation, from a TOML config
    Cv { config: PathBuf },
    /// Generate a synthetic multimodal cohort
    Synth {
        /// TOML spec; the built-in default when omitted
        spec: Option<PathBuf>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Fit missingness filtering, imputation, encoding, z-scoring, pruning and screening
    Preprocess {
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, default_value_t = 10)]
        n_splits: usize,
        #[arg(long, default_value_t = 0.2)]
        missing_threshold: f64,
        #[arg(long, default_value_t = 0.8)]
        corr_cutoff: f64,
    },
    /// Forward feature selection on a pre-processed table
    Select {
        /// Pre-processed feature CSV
        #[arg(long)]
        features: PathBuf,
        /// Report written by `preprocess` (ranked candidates)
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, default_value_t = 10)]
        n_splits: usize,
        #[arg(long, default_value_t = 20)]
        max_features: usize,
    },
    /// Fit a Cox model
    FitCox {
        #[arg(long)]
        features: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        /// Comma-separated columns (all when omitted)
        #[arg(long, value_delimiter = ',')]
        columns: Option<Vec<String>>,
        #[arg(long, value_enum, default_value = "efron")]
        ties: TiesArg,
    },
    /// Train the deep Cox model on embedding bags
    FitDeep {
        #[arg(long)]
        bags: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        /// TOML model/training configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Evaluate every risk column of a CSV against outcomes
    Evaluate {
        /// CSV with `patient_id` and one or more risk columns
        #[arg(long)]
        risks: PathBuf,
        #[command(flatten)]
        cohort: CohortArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        horizons: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        n_bootstrap: usize,
    },
    /// Fuse per-modality risk columns
    Fuse {
        /// CSV with `patient_id` and one column per modality
        #[arg(long)]
        scores: PathBuf,
        /// Validation C-index per modality, in column order
        #[arg(long, value_delimiter = ',', conflicts_with = "uniform", required_unless_present = "uniform")]
        p_val: Option<Vec<f64>>,
        #[arg(long)]
        uniform: bool,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum TiesArg {
    Breslow,
    Efron,
}

impl From<TiesArg> for Ties {
    fn from(t: TiesArg) -> Self {
        match t {
            TiesArg::Breslow => Ties::Breslow,
            TiesArg::Efron => Ties::Efron,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    let c = &cli.common;
    pool.install(|| match cli.command {
        Command::PrepWsi {
            image_dir,
            min_tissue,
            threshold,
            no_images,
        } => commands::prep_wsi(c, &image_dir, min_tissue, threshold, !no_images),
        Command::Cv { config } => commands::cv(c, &config),
        Command::Synth { spec, n_patients } => commands::synth(c, spec.as_deref(), n_patients),
        Command::Preprocess {
            features,
            cohort,
            n_splits,
            missing_threshold,
            corr_cutoff,
        } => commands::preprocess(c, &features, &cohort, n_splits, missing_threshold, corr_cutoff),
        Command::Select {
            features,
            report,
            cohort,
            n_splits,
            max_features,
        } => commands::select(c, &features, &report, &cohort, n_splits, max_features),
        Command::FitCox {
            features,
            cohort,
            columns,
            ties,
        } => commands::fit_cox(c, &features, &cohort, columns, ties.into()),
        Command::FitDeep {
            bags,
            cohort,
            config,
            val_fraction,
        } => commands::fit_deep(c, &bags, &cohort, config.as_deref(), val_fraction),
        Command::Evaluate {
            risks,
            cohort,
            horizons,
            n_bootstrap,
        } => commands::evaluate(c, &risks, &cohort, &horizons, n_bootstrap),
        Command::Fuse { scores, p_val, uniform } => commands::fuse(c, &scores, p_val, uniform),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
