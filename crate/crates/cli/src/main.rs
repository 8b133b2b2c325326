//! Command-line front end for the lesion tracking toolkit.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 data error,
//! 4 numeric error.

mod commands;
mod config;
mod data;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lesiontrack::error::{Error, ErrorClass, Result};
use lesiontrack::sampling::Variant;

use commands::{Method, TrackArgs};
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "lesiontrack",
    version,
    about = "Coarse-to-fine single-lesion tracking across exam pairs"
)]
struct Cli {
    /// JSON run configuration (flags override file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file and the TRACKER_SEED
    /// environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages. Results are byte-identical
    /// for any value.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    #[value(name = "crop_resize")]
    CropResize,
    #[value(name = "mask_guided")]
    MaskGuided,
    #[value(name = "masked")]
    Masked,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::CropResize => Variant::CropResize,
            VariantArg::MaskGuided => Variant::MaskGuided,
            VariantArg::Masked => Variant::Masked,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Affine,
    Tracker,
    Full,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Affine => Method::Affine,
            MethodArg::Tracker => Method::Tracker,
            MethodArg::Full => Method::Full,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark with train and test splits.
    Generate {
        /// Output directory (gets train/ and test/ subdirectories).
        #[arg(long)]
        out: PathBuf,
        /// Training cases to generate.
        #[arg(long)]
        cases: Option<usize>,
        /// Test cases to generate.
        #[arg(long)]
        test_cases: Option<usize>,
        /// Time points per view.
        #[arg(long)]
        timepoints: Option<usize>,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the local tracker on a generated split.
    TrainTracker {
        /// Directory holding manifest.json and images.
        #[arg(long)]
        data: PathBuf,
        /// Where to write the trained weights.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV loss trace (one row per epoch).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Template construction variant.
        #[arg(long, value_enum)]
        template_variant: Option<VariantArg>,
    },
    /// Train the candidate refiner against a trained tracker.
    TrainRefiner {
        #[arg(long)]
        data: PathBuf,
        /// Trained tracker weights used to harvest candidates.
        #[arg(long)]
        tracker: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Track every enumerated exam pair and write JSONL results.
    Track {
        #[arg(long)]
        data: PathBuf,
        /// Trained tracker weights (methods tracker and full).
        #[arg(long)]
        tracker: Option<PathBuf>,
        /// Trained refiner weights (method full).
        #[arg(long)]
        refiner: Option<PathBuf>,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// affine = registration only; tracker = no refinement;
        /// full = complete cascade.
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
        /// Rank candidates by classification score alone.
        #[arg(long)]
        no_centerness: bool,
        #[arg(long, value_enum)]
        template_variant: Option<VariantArg>,
    },
    /// Score a JSONL results file against its dataset.
    Eval {
        /// JSONL results from `track`.
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.json, the success curve CSV,
        /// and the plot.
        #[arg(long)]
        out: PathBuf,
        /// Series label used in the plot legend.
        #[arg(long, default_value = "run")]
        label: String,
    },
    /// Overlay success curves from several metrics.json files.
    Plot {
        /// Output SVG path.
        #[arg(long)]
        out: PathBuf,
        /// One or more LABEL=METRICS.json entries.
        #[arg(required = true)]
        series: Vec<String>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_variant(cfg: &mut RunConfig, variant: Option<VariantArg>) {
    if let Some(v) = variant {
        cfg.variant = v.into();
        cfg.tracker.in_channels = if cfg.variant.uses_mask() { 2 } else { 1 };
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("could not build thread pool: {e}")))?;

    let mut cfg = load_config(cli.config.as_ref())?;
    let seed = cfg.resolve_seed(cli.seed)?;

    match cli.command {
        Command::Generate {
            out,
            cases,
            test_cases,
            timepoints,
            force,
        } => {
            if let Some(n) = cases {
                cfg.synth.num_cases = n;
            }
            if let Some(n) = test_cases {
                cfg.test_cases = n;
            }
            if let Some(n) = timepoints {
                cfg.synth.timepoints_per_view = n;
            }
            commands::cmd_generate(&cfg, seed, &out, force, cli.jobs)
        }
        Command::TrainTracker {
            data,
            out,
            trace,
            epochs,
            batch_size,
            learning_rate,
            template_variant,
        } => {
            apply_variant(&mut cfg, template_variant);
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            if let Some(n) = batch_size {
                cfg.train.batch_size = n;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            commands::cmd_train_tracker(&cfg, seed, &data, &out, trace.as_deref())
        }
        Command::TrainRefiner {
            data,
            tracker,
            out,
            trace,
            epochs,
            batch_size,
            learning_rate,
        } => {
            if let Some(n) = epochs {
                cfg.refine_train.epochs = n;
            }
            if let Some(n) = batch_size {
                cfg.refine_train.batch_size = n;
            }
            if let Some(lr) = learning_rate {
                cfg.refine_train.learning_rate = lr;
            }
            commands::cmd_train_refiner(&cfg, seed, &data, &tracker, &out, trace.as_deref())
        }
        Command::Track {
            data,
            tracker,
            refiner,
            out,
            method,
            no_centerness,
            template_variant,
        } => {
            apply_variant(&mut cfg, template_variant);
            if no_centerness {
                cfg.use_centerness = false;
            }
            commands::cmd_track(
                &cfg,
                &TrackArgs {
                    data: &data,
                    tracker: tracker.as_deref(),
                    refiner: refiner.as_deref(),
                    out: &out,
                    method: method.into(),
                    jobs: cli.jobs,
                },
            )
        }
        Command::Eval {
            results,
            data,
            out,
            label,
        } => commands::cmd_eval(&cfg, &results, &data, &out, &label),
        Command::Plot { out, series } => commands::cmd_plot(&out, &series),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
