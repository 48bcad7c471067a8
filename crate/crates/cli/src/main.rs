mod commands;
mod tiles;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pvae", version, about = "Poisson VAE numerical laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a run configuration.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds overriding the configuration.
    #[arg(long, value_delimiter = ',', alias = "seed")]
    pub seeds: Option<Vec<u64>>,
    /// Concurrent training runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Ista,
    Lca,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and preprocess a dataset into PVLB caches.
    Prep(Common),
    /// Train one model per seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing state checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Train each gradient mode on every seed and tabulate percent drops.
    CompareGrads {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gradient modes (ex, mc, st) overriding the configuration.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
    },
    /// Compute metrics of a checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated list from nelbo, mse, kl, sparsity, active, knn, shatter.
        #[arg(long, default_value = "nelbo,mse,kl")]
        metrics: String,
    },
    /// Learn a sparse-coding dictionary with ISTA or LCA inference.
    ScTrain {
        #[command(flatten)]
        common: Common,
        /// Number of dictionary atoms.
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum)]
        solver: Option<SolverArg>,
        /// Search the full hyperparameter grid instead of the configured settings.
        #[arg(long)]
        grid: bool,
    },
    /// LCA inference on a fixed dictionary over a grid of β values.
    ScInfer {
        #[command(flatten)]
        common: Common,
        /// Dictionary file or model checkpoint.
        #[arg(long)]
        dictionary: PathBuf,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
    /// Render dictionary columns as an image grid.
    ExportDict {
        /// Dictionary file or model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration whose validation data orders tiles by per-latent KL.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output image; the extension selects PGM (.pgm) or PNG (.png).
        #[arg(long)]
        out: PathBuf,
        /// Tiles per row; defaults to the ceiling of √K.
        #[arg(long)]
        columns: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Train one model per (β, seed) and report rate–distortion points.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Prep(c) => commands::prep(&c),
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::CompareGrads { common, modes } => commands::compare_grads(&common, modes),
        Command::Eval {
            common,
            checkpoint,
            metrics,
        } => commands::eval(&common, &checkpoint, &metrics),
        Command::ScTrain {
            common,
            k,
            solver,
            grid,
        } => commands::sc_train(&common, k, solver, grid),
        Command::ScInfer {
            common,
            dictionary,
            betas,
        } => commands::sc_infer(&common, &dictionary, betas),
        Command::ExportDict {
            checkpoint,
            config,
            out,
            columns,
            width,
            height,
        } => commands::export_dict(&checkpoint, config.as_deref(), &out, columns, width, height),
        Command::Sweep { common, betas } => commands::sweep(&common, betas),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
