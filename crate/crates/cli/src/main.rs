//! `atrousformer` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a verification run fails (or a run
//! aborts numerically), 2 on usage or configuration errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "atrousformer", version, about = "Atrous row/column attention for lane segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CountMode {
    Dense,
    Global,
    Local,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    Single,
    Double,
}

#[derive(Subcommand)]
enum Command {
    /// Key/value positions per query and query-key dot products.
    Count {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        density: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        /// Local slice as `rows,cols`; required for the local rows.
        #[arg(long)]
        slice: Option<String>,
        #[arg(long, value_enum, default_value_t = CountMode::All)]
        mode: CountMode,
    },
    /// Compares the band-gather attention with the dense masked oracle.
    OracleDiff {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
        precision: PrecisionArg,
        /// Shift the keys/values of this band by one row (negative control).
        #[arg(long, hide = true)]
        fault_band: Option<usize>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// stage, global, local, decoder or all.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distort one analytic gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Trains on synthetic scenes and writes metrics, a checkpoint and a log.
    Train {
        /// Flat `key = value` file; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Scores a checkpoint on an exported dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exports synthetic scenes, one directory per sample.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Guided versus uniform existence attention under one budget.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        /// Overrides `train.steps` for both arms.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Count {
            height,
            width,
            density,
            heads,
            slice,
            mode,
        } => commands::count(height, width, density, heads, slice.as_deref(), mode),
        Command::OracleDiff {
            seeds,
            precision,
            fault_band,
        } => commands::oracle_diff(seeds, precision, fault_band),
        Command::Gradcheck { scope, seed, corrupt } => commands::gradcheck(&scope, seed, corrupt),
        Command::Train { config, out } => commands::train(config.as_deref(), &out),
        Command::Eval {
            checkpoint,
            dataset_dir,
            out,
        } => commands::eval(&checkpoint, &dataset_dir, out.as_deref()),
        Command::Generate {
            out,
            count,
            seed,
            config,
        } => commands::generate(&out, count, seed, config.as_deref()),
        Command::Ablate {
            config,
            seeds,
            steps,
            out,
        } => commands::ablate(config.as_deref(), &seeds, steps, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
