//! `tunet` command-line tool: synthetic data generation, training,
//! cross-validation, evaluation, benchmarking, parameter tables, and
//! attention-map export.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use tunet_core::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "tunet", version, about = "Token-bottleneck 3D segmentation UNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration file (flat `section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every section's seed at once.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Kernel thread count (default: all cores). Results are identical for
    /// any value; this only affects speed.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,

    /// Also write the structured output of the command as JSON.
    #[arg(long, global = true)]
    json: Option<PathBuf>,

    /// Zero wall-clock fields so repeated runs are byte-comparable.
    #[arg(long, global = true)]
    stable_time: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a single cross-validation fold and write its checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full cross-validation driver.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with sliding-window inference.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Measure forward cost (time, peak bytes, FLOP split) across sizes.
    Bench {
        #[arg(long)]
        variant: String,
        #[arg(long, value_delimiter = ',', default_value = "16,32,48")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
    },
    /// Print trainable-parameter tables.
    Params {
        /// One variant, or all four when omitted.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value = "desk")]
        scale: String,
    },
    /// Export TokenLearner attention maps for one subject.
    AttnExport {
        #[arg(long)]
        ckpt: PathBuf,
        /// Subject directory (with image.tvol) or a .tvol file.
        #[arg(long)]
        subject: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::UnsupportedVariant(_) | Error::Shape { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // ignore "already initialized": only possible in tests
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match cli.precision {
        Precision::F32 => commands::run::<f32>(&cli),
        Precision::F64 => commands::run::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
