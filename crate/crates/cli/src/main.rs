//! `hwmnet`: train, enhance, score and account for HWMNet models.
//!
//! Exit status: 0 on success, 1 on invalid arguments or failed checks,
//! 2 when a file is missing, unreadable or malformed.

/// `println!` that ends the process quietly once stdout's reader is gone.
macro_rules! say {
    () => {
        $crate::emit(format_args!(""))
    };
    ($($arg:tt)*) => {
        $crate::emit(format_args!($($arg)*))
    };
}

mod commands;
mod settings;

use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "hwmnet",
    version,
    about = "Low-light image enhancement with half wavelet attention"
)]
struct Cli {
    /// Seed for weight initialization and patch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// File of `key = value` lines: network keys (levels, base_width,
    /// widths, schedule, ...) and training keys (iterations, batch, patch,
    /// lr_start, ...). Command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on `<root>/low` and `<root>/high`, writing checkpoints and loss.csv.
    Train(TrainArgs),
    /// Enhance one image or every image in a directory.
    Infer(InferArgs),
    /// Per-image and mean PSNR/SSIM of enhanced low images against ground truth.
    Eval(EvalArgs),
    /// Parameter and FLOP counts per layer.
    Flops(FlopsArgs),
    /// Double-precision finite-difference check of every gradient.
    Gradcheck,
    /// Wavelet, shuffle, identity and metric closed-form checks.
    Selfcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Schedule {
    Doubling,
    Constant,
}

impl Schedule {
    fn as_str(self) -> &'static str {
        match self {
            Schedule::Doubling => "doubling",
            Schedule::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Loss {
    Mean,
    Global,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root holding `low/` and `high/`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory for checkpoints, loss.csv and val.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Test-scale preset: levels 3, width 16, constant widths, 2000
    /// iterations on 64x64 patches.
    #[arg(long)]
    desk: bool,
    #[arg(long, value_name = "N")]
    iters: Option<u64>,
    #[arg(long, value_name = "B")]
    batch: Option<usize>,
    #[arg(long, value_name = "P")]
    patch: Option<usize>,
    /// Channels of the first level.
    #[arg(long, value_name = "W")]
    width: Option<usize>,
    #[arg(long, value_name = "L")]
    levels: Option<usize>,
    /// How trunk widths grow with depth.
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    /// Initial learning rate of the cosine schedule.
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    /// Final learning rate of the cosine schedule.
    #[arg(long, value_name = "LR")]
    lr_end: Option<f64>,
    /// Rescale gradients whose global norm exceeds this value.
    #[arg(long, value_name = "NORM")]
    clip_grad_norm: Option<f64>,
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<u64>,
    /// Score the validation set every N iterations (needs --val).
    #[arg(long, value_name = "N")]
    eval_every: Option<u64>,
    /// Validation root holding `low/` and `high/`.
    #[arg(long, value_name = "DIR")]
    val: Option<PathBuf>,
    /// Center crop applied to validation images.
    #[arg(long, value_name = "N", default_value_t = 256)]
    val_crop: usize,
    /// Continue from a checkpoint that carries training state.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long, value_name = "CKPT")]
    weights: PathBuf,
    /// An image or a directory of images.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "CKPT")]
    weights: PathBuf,
    #[arg(long, value_name = "DIR")]
    low: PathBuf,
    #[arg(long, value_name = "DIR")]
    gt: PathBuf,
    /// Score a centered N x N crop of every image.
    #[arg(long, value_name = "N")]
    center_crop: Option<usize>,
    /// Also write the scores as CSV (`-` for stdout).
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long, value_name = "H", default_value_t = 400)]
    height: usize,
    #[arg(long, value_name = "W", default_value_t = 592)]
    width: usize,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    /// List every counted operation instead of per-stage totals.
    #[arg(long)]
    detail: bool,
    /// Write every counted operation as CSV (`-` for stdout).
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

/// A command failure and the exit status it maps to.
#[derive(Debug)]
enum Failure {
    /// Bad arguments, inconsistent configuration or a failed check.
    Invalid(String),
    /// A file that is missing, unreadable or malformed.
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<hwmnet::Error> for Failure {
    fn from(e: hwmnet::Error) -> Self {
        if e.is_io_or_format() {
            Failure::Io(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn emit(args: fmt::Arguments<'_>) {
    let mut out = io::stdout().lock();
    if let Err(e) = out.write_fmt(args).and_then(|_| out.write_all(b"\n")) {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Outcome {
    let workers = settings::worker_cap()?;
    let file = settings::ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Train(args) => commands::train(&args, cli.seed, &file),
        Command::Infer(args) => commands::infer(&args, &file, workers),
        Command::Eval(args) => commands::eval(&args, &file),
        Command::Flops(args) => commands::flops(&args, &file),
        Command::Gradcheck => commands::gradcheck(),
        Command::Selfcheck => commands::selfcheck(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
