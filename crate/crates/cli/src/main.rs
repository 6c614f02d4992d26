//! `spikefield` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::CliError;

#[derive(Parser, Debug)]
#[command(name = "spikefield", version, about = "Spiking voxel-grid radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded so results are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a scene to a dataset directory.
    Train(TrainArgs),
    /// Render the poses of a dataset split to PNG.
    Render(EvalArgs),
    /// PSNR / SSIM against a dataset split.
    Eval(EvalArgs),
    /// Spiking vs conventional energy estimate on identical rays.
    Energy(EvalArgs),
    /// Compare padded and condensed packing on real masks.
    PackBench(EvalArgs),
    /// Write a procedural dataset.
    MakeScene(MakeSceneArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EncoderArg {
    Aligned,
    Direct,
    Poisson,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PackingArg {
    Tp,
    Tcp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Flags that override the render section of the config.
#[derive(Args, Debug, Clone, Default)]
pub struct RenderFlags {
    /// JSON config file with `model`, `render`, `train` and `energy` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    /// Time steps for direct / poisson encoding.
    #[arg(long)]
    pub time_steps: Option<usize>,
    #[arg(long, value_enum)]
    pub flip: Option<Toggle>,
    #[arg(long, value_enum)]
    pub packing: Option<PackingArg>,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Seed for every random draw (config value, 42 by default).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory with `transforms_train.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from a checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_rays: Option<usize>,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[command(flatten)]
    pub render: RenderFlags,
}

#[derive(Args, Debug)]
pub struct MakeSceneArgs {
    #[arg(long, default_value = "cube-sphere")]
    pub preset: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Image width and height in pixels.
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Energy(a) => commands::energy(&a),
        Command::PackBench(a) => commands::pack_bench(&a),
        Command::MakeScene(a) => commands::make_scene(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spikefield: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
