//! `mpgan` command line: phantom generation, training, visualization,
//! map evaluation and the augmentation experiment.
//!
//! Every command writes into a run directory with a fixed layout:
//! `config.frozen`, `losses.csv`, `ssim.csv`, `checkpoints/`, `maps/`,
//! `overlays/` and `reports/` (commands create the parts they use).

pub mod commands;
pub mod config;
pub mod data;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{parse_config, resolve_seed, ConfigError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mpgan", version, about = "Class-discriminative map GAN for 3D volumes")]
pub struct Cli {
    /// Global seed; overrides MPGAN_SEED and the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset with ground-truth maps.
    Phantom {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator, classifier and discriminator.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest; overrides `data.manifest`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a class-discriminative map over a volume.
    Visualize(VisualizeArgs),
    /// Score predicted maps against ground-truth maps on the test split.
    Evaluate(EvalArgs),
    /// Classifier trained with and without synthesized volumes.
    AugmentEval {
        #[command(flatten)]
        common: EvalArgs,
        /// Synthesized volumes per class; overrides `augment.per_class`.
        #[arg(long)]
        per_class: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// MPGV volume with intensities in [-1, 1].
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub target_class: usize,
    /// Comma-separated subset of axial, coronal, sagittal.
    #[arg(long, default_value = "axial,coronal,sagittal")]
    pub views: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Slice index; the central slice of each view by default.
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long, default_value_t = 0.7)]
    pub alpha: f64,
    #[arg(long, default_value = "blue-gray-red")]
    pub colormap: String,
    /// Integer label volume (MPGV) for the region report.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub top_n: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its machine-readable category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}: {}", self.category, self.message)
    }
}

impl From<mpgan::Error> for CliError {
    fn from(e: mpgan::Error) -> Self {
        CliError {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError {
            category: e.category(),
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 1 on a command failure (one `error: Category: message`
/// line on stderr), 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_string().replace('\n', " "));
            1
        }
    }
}
