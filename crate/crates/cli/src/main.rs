use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use erra::network::Variant;

mod commands;
mod config;

/// Train, fuse, run and measure the residual attention dehazing network.
///
/// Exit codes: 0 success, 2 bad input or configuration, 3 numeric failure
/// during training, 4 model in the wrong state (for example fusing an
/// already fused model).
#[derive(Parser, Debug)]
#[command(name = "erra", version, args_override_self = true)]
struct Cli {
    /// Flat `key = value` file whose keys are long flag names; flags given
    /// on the command line take precedence
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a training-form model and write checkpoints and a loss log
    Train(TrainArgs),
    /// Collapse the branches of a training-form model into single convolutions
    Fuse(FuseArgs),
    /// Dehaze one PNG image
    Infer(InferArgs),
    /// Score a model on a paired hazy/clean directory
    Evaluate(EvaluateArgs),
    /// Time full-image inference, multi-branch against fused
    Benchmark(BenchmarkArgs),
    /// Write hazy/clean pairs from clean images and random transmission maps
    Synthesize(SynthesizeArgs),
    /// Write a freshly initialised model file
    Init(InitArgs),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!(
            "unknown variant {s:?}, expected one of {}",
            names.join(", ")
        )
    })
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset root holding `hazy/` and `clean/` PNGs with matching names
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on procedurally generated hazy/clean pairs instead of a dataset
    #[arg(long)]
    pub synthetic: bool,
    /// Number of synthetic training pairs
    #[arg(long, default_value_t = 64)]
    pub synthetic_pairs: usize,
    /// Side length of synthetic training images
    #[arg(long, default_value_t = 160)]
    pub image_size: usize,
    /// Optimizer steps
    #[arg(long, default_value_t = 6000)]
    pub steps: usize,
    /// Patches per step
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Patch side length, a multiple of 32
    #[arg(long, default_value_t = 128)]
    pub patch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Initial (and minimum) cyclical learning rate
    #[arg(long, default_value_t = 6e-4)]
    pub base_lr: f64,
    /// Peak cyclical learning rate
    #[arg(long, default_value_t = 1.2e-3)]
    pub max_lr: f64,
    /// Steps per learning-rate half cycle
    #[arg(long, default_value_t = 10)]
    pub step_size: usize,
    /// Weight of the colour attenuation term
    #[arg(long, default_value_t = 0.5)]
    pub alpha1: f64,
    /// Weight of the Laplacian pyramid term
    #[arg(long, default_value_t = 5.0)]
    pub alpha2: f64,
    /// Saturation weight inside the colour attenuation term
    #[arg(long, default_value_t = 1.0)]
    pub ca_alpha: f64,
    /// Brightness weight inside the colour attenuation term
    #[arg(long, default_value_t = 0.5)]
    pub ca_beta: f64,
    /// Block structure: base, bn-am, full or per-branch-bn
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    /// Pairs held out and scored after training; 0 disables
    #[arg(long, default_value_t = 8)]
    pub heldout: usize,
    /// Side length of synthetic held-out images
    #[arg(long, default_value_t = 128)]
    pub heldout_size: usize,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: usize,
    /// Log the loss every N steps; 0 is quiet
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Output directory for checkpoints, `loss.csv` and `final.erra`
    #[arg(long, value_name = "DIR", default_value = "runs/train")]
    pub out: PathBuf,
    /// Checkpoint to continue from; its `.state` file must sit next to it
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct FuseArgs {
    /// Training-form model file
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Where to write the fused model
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Key-value report file; defaults to the output path plus `.report`
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// Side length of the random probe used to measure deviations
    #[arg(long, default_value_t = 64)]
    pub probe_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct InferArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Hazy PNG
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Dehazed PNG
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Dataset root holding `hazy/` and `clean/`
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Per-image scores
    #[arg(long, value_name = "FILE", default_value = "evaluation.csv")]
    pub csv: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct BenchmarkArgs {
    /// Model file; a training-form model is also fused and both are timed.
    /// Without it a random full model is used
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1600)]
    pub width: usize,
    #[arg(long, default_value_t = 1200)]
    pub height: usize,
    /// Timed runs per form
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Untimed runs before timing
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Time only the model as given
    #[arg(long)]
    pub no_fuse: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct SynthesizeArgs {
    /// Directory of clean PNGs
    #[arg(
        long,
        value_name = "DIR",
        required_unless_present = "procedural",
        conflicts_with = "procedural"
    )]
    pub clean: Option<PathBuf>,
    /// Generate this many procedural clean images instead
    #[arg(long, value_name = "N")]
    pub procedural: Option<usize>,
    /// Side length of procedural images
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Output root; `hazy/`, `clean/` and `recipes.csv` are written inside
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Lowest transmission the random field reaches
    #[arg(long, default_value_t = 0.15)]
    pub t_min: f64,
    /// How far the field reaches towards `t-min`, in [0, 1]
    #[arg(long, default_value_t = 1.0)]
    pub density: f64,
    /// Smallest and largest number of haze blobs
    #[arg(long, default_value_t = 3)]
    pub blobs_min: usize,
    #[arg(long, default_value_t = 8)]
    pub blobs_max: usize,
    /// One airlight value shared by all channels
    #[arg(long)]
    pub gray_airlight: bool,
    /// Transmission 1 everywhere, so the hazy image equals the clean one
    #[arg(long)]
    pub no_haze: bool,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct InitArgs {
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
    /// Block structure: base, bn-am, full or per-branch-bn
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    /// All parameters zero, which makes the model the identity
    #[arg(long)]
    pub zero: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Init(a) => commands::init(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
