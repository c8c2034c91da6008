//! `pn2v`: synthesize data, build noise models, train, denoise and evaluate.
//!
//! Exit status is 0 on success, 1 when arguments or inputs fail validation
//! (nothing is written in that case) and 2 when a validated run fails.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum Failure {
    /// Rejected before any work started.
    Usage(String),
    /// Failed while running.
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(err: impl std::fmt::Display) -> Self {
        Failure::Runtime(err.to_string())
    }
}

impl From<pn2v::Error> for Failure {
    fn from(e: pn2v::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "pn2v", version, about = "Probabilistic blind-spot denoising")]
struct Cli {
    /// Worker threads [default: $PN2V_THREADS, else all cores].
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic clean/ and noisy/ image pairs plus a replayable manifest.
    Synth(SynthArgs),
    /// Build a histogram noise model from matched clean/ and noisy/ images.
    BuildNm(BuildNmArgs),
    /// Train a network and save its best-validation checkpoint.
    Train(TrainArgs),
    /// Denoise images with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score predictions against ground truth (mean ± 2 SEM).
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Key-value file with defaults for the flags below (a manifest works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gaussian | poisson_gaussian
    #[arg(long)]
    pub kind: Option<String>,
    /// sinusoids | disks | wedges | constant
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of image pairs.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub gain: Option<f64>,
    #[arg(long)]
    pub low: Option<f64>,
    #[arg(long)]
    pub high: Option<f64>,
    /// Intensity of the constant pattern.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// raw (lossless) | png (16-bit, rounded and clamped)
    #[arg(long)]
    pub format: Option<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct BuildNmArgs {
    /// Directory containing clean/ and noisy/ with matching file names.
    #[arg(long)]
    pub data: PathBuf,
    /// Noise-model file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bins per axis.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Observation-axis bins, if different.
    #[arg(long)]
    pub bins_x: Option<usize>,
    /// Lower end of the shared intensity range [default: from data].
    #[arg(long, allow_negative_numbers = true)]
    pub range_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub range_max: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// pn2v | n2v | supervised
    #[arg(long)]
    pub mode: Option<String>,
    /// Directory with noisy/ (and clean/ for supervised), or of noisy images.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch log [default: <out>.log].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub noise_model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub plateau_factor: Option<f64>,
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    #[arg(long)]
    pub n_masked: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub val_patches: Option<usize>,
    /// Disable flip/transpose augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Output samples per pixel [default: 100 for pn2v, else 1].
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub base_features: Option<usize>,
    /// Weight-initialization seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; files keep their input names.
    #[arg(long)]
    pub out: PathBuf,
    /// mmse | prior_mean | n2v_direct [default: mmse for pn2v checkpoints, else n2v_direct]
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub noise_model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tile side [default: overlap * 2 + 128].
    #[arg(long)]
    pub tile: Option<usize>,
    /// Context margin per tile side [default: receptive-field radius rounded up to the pooling grid].
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Pixel `row,col` whose posterior is written to <stem>.posterior.txt; repeatable.
    #[arg(long = "dump-posterior", value_name = "ROW,COL")]
    pub dump_posterior: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth images with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// psnr | si_psnr
    #[arg(long)]
    pub metric: Option<String>,
    /// CSV records file (`image,value,metric`).
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("PN2V_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| Failure::usage(format!("PN2V_THREADS: bad value `{v}`")))?),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Failure::usage("thread count must be positive"));
    }
    Ok(n)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::runtime)?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::BuildNm(a) => commands::build_nm(a),
        Command::Train(a) => commands::train(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
