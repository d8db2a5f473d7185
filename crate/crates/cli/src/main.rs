mod commands;
mod config;
mod error;
mod manifest;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "densecontrast", version, about = "Point-level contrastive pre-training for sparse voxel networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render depth frames of a synthetic scene.
    Synth(SynthArgs),
    /// Mine overlapping view pairs with correspondences from frame directories.
    Pairgen(PairgenArgs),
    /// Pre-train a network on a pair directory.
    Pretrain(PretrainArgs),
    /// Feature-matching recall of a checkpoint on a pair directory.
    Eval(EvalArgs),
    /// Run the built-in gradient and oracle checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene spec (TOML).
    #[arg(long, required_unless_present = "print_template")]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_template")]
    out: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print an annotated spec and exit.
    #[arg(long)]
    print_template: bool,
}

#[derive(Debug, Args)]
struct PairgenArgs {
    /// One directory of frames per scene; the directory name is the scene id.
    #[arg(long, required = true, num_args = 1..)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep every n-th frame.
    #[arg(long, default_value_t = 25)]
    stride: usize,
    /// Minimum overlap ratio of an emitted pair.
    #[arg(long, default_value_t = 0.30)]
    threshold: f64,
    /// Match radius in meters.
    #[arg(long, default_value_t = 0.025)]
    radius: f64,
    /// Voxel size used to thin each view, in meters.
    #[arg(long, default_value_t = 0.025)]
    voxel_size: f64,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long, required_unless_present = "print_template")]
    pairs: Option<PathBuf>,
    /// Pre-training config (TOML); see --print-template.
    #[arg(long, required_unless_present = "print_template")]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_template")]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.max_iters`.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Overrides `train.base_lr`.
    #[arg(long)]
    base_lr: Option<f64>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print an annotated config and exit.
    #[arg(long)]
    print_template: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoseArg {
    /// Views stay in the shared world frame.
    World,
    /// Each view gets an independent seeded random rotation.
    Rotated,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Network checkpoint; omit with --coordinates.
    #[arg(long, required_unless_present = "coordinates")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hit radius in meters.
    #[arg(long, default_value_t = 0.1)]
    inlier_distance: f64,
    /// Hit ratio a pair must exceed to count as recalled.
    #[arg(long, default_value_t = 0.05)]
    inlier_ratio: f64,
    #[arg(long, default_value_t = 0.05)]
    voxel_size: f64,
    #[arg(long, value_enum, default_value_t = PoseArg::Rotated)]
    pose: PoseArg,
    /// Seed of the evaluation poses and of the random-init baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use world coordinates as features instead of a network.
    #[arg(long)]
    coordinates: bool,
    /// Also evaluate a randomly initialized network of the same shape.
    #[arg(long)]
    compare_random: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Gradcheck,
    Oracles,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    ConvBackwardSign,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Randomized instances per gradient check.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Deliberately break a backward pass to confirm the checks catch it.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pairgen(a) => commands::pairgen(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Eval(a) => commands::eval(a),
        Command::Verify(a) => commands::verify(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
