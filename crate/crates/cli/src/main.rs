mod commands;
mod oracle;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code for invalid input, configuration or artifacts.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code when an oracle finds a violation.
pub const EXIT_ORACLE: u8 = 3;
/// Exit code when calibration diverges.
pub const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "aquant", version, about = "Adaptive activation rounding for post-training quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded toy conv net with calibration and evaluation sets.
    Gen(GenArgs),
    /// Calibrate a full-precision model on a calibration set.
    Calibrate(CalibrateArgs),
    /// Compare quantized models against full precision on held-out data.
    Evaluate(EvaluateArgs),
    /// Run the brute-force and Monte-Carlo verification oracles.
    Oracle(OracleArgs),
    /// Print the parameter, size and compute overhead of border functions.
    Overhead(OverheadArgs),
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration samples.
    #[arg(long, default_value_t = 1024)]
    pub n_calib: usize,
    /// Held-out evaluation samples.
    #[arg(long, default_value_t = 256)]
    pub n_eval: usize,
    /// Output channels of each convolution, 3 to 5 entries.
    #[arg(long, value_delimiter = ',', default_value = "8,8,4")]
    pub channels: Vec<usize>,
    /// Input `channels,height,width`.
    #[arg(long, value_delimiter = ',', default_value = "3,6,6")]
    pub input: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long)]
    pub no_residual: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BorderArg {
    /// Rounding to nearest; only weight rounding is calibrated.
    Nearest,
    /// Weight-rounding calibration followed by per-element analytic borders.
    Analytic,
    Linear,
    Quadratic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Layerwise,
    Blockwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Full-precision model directory.
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration sample-set directory.
    #[arg(long)]
    pub calib: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON calibration config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bits_w: Option<u32>,
    #[arg(long)]
    pub bits_a: Option<u32>,
    /// Bitwidth of the first and last layers, or `none` for the global widths.
    #[arg(long)]
    pub bits_first_last: Option<String>,
    #[arg(long, value_enum)]
    pub border: Option<BorderArg>,
    #[arg(long)]
    pub fusion: Option<bool>,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iterations per layer or block.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Keeps the default rounding regularization for learned borders
    /// instead of the stronger border-layer setting.
    #[arg(long)]
    pub plain_schedule: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Full-precision model directory.
    #[arg(long)]
    pub fp: PathBuf,
    /// Evaluation sample-set directory.
    #[arg(long)]
    pub eval: PathBuf,
    /// Quantized model directory, optionally as `name=dir`. The first one
    /// also provides the nearest-rounding baseline.
    #[arg(long = "candidate", required = true)]
    pub candidates: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Adds a row with analytic per-element borders on the nearest baseline.
    #[arg(long)]
    pub analytic: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Positions per layer scored for the superior ratio.
    #[arg(long, default_value_t = aquant_core::report::DEFAULT_MAX_POSITIONS)]
    pub max_positions: usize,
}

#[derive(Args)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random `(w, dw)` pairs for the border-side check.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    /// Grid points over `[-8, 8]`.
    #[arg(long, default_value_t = 3201)]
    pub grid: usize,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    /// Random instances for the brute-force dominance check.
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Sweeps `dw = 0` only.
    #[arg(long)]
    pub zero_dw: bool,
    /// Flips the sign of the analytic border slope; the run must then fail.
    #[arg(long)]
    pub mutate_sign: bool,
    /// Writes the summary as JSON here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct OverheadArgs {
    /// Model directory; layers added with `--conv` or `--fc` are used otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Convolution `o_c,i_c,k`; repeatable.
    #[arg(long)]
    pub conv: Vec<String>,
    /// Fully connected `in,out`; repeatable.
    #[arg(long)]
    pub fc: Vec<String>,
    /// Border assumed on every layer; defaults to the attached one.
    #[arg(long, value_enum)]
    pub border: Option<BorderArg>,
    #[arg(long)]
    pub fusion: bool,
    #[arg(long, default_value_t = aquant_core::quantizer::DEFAULT_BORDER_BITS)]
    pub bits_border: u32,
    #[arg(long)]
    pub bits_weight: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(oracle::Violations(_)) = err.downcast_ref() {
        return EXIT_ORACLE;
    }
    match err.downcast_ref::<aquant_core::Error>() {
        Some(aquant_core::Error::Diverged { .. }) => EXIT_DIVERGED,
        _ => EXIT_VALIDATION,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AQUANT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("AQUANT_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Oracle(a) => oracle::run(&a),
        Command::Overhead(a) => commands::overhead(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
