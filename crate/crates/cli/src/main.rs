//! `repfield3d`: verification and experiment harness for re-parameterized
//! large-kernel 3D depthwise convolutions.
//!
//! Exit codes: 0 pass, 1 verification failure or divergence, 2 usage or
//! configuration error.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use repfield3d::Error;

#[derive(Parser)]
#[command(name = "repfield3d", version)]
#[command(about = "Merge, train and probe re-parameterized large-kernel 3D convolutions")]
struct Cli {
    /// Output directory for artifacts and manifest.txt
    #[arg(long, global = true, env = "REPFIELD3D_OUT")]
    out: Option<PathBuf>,

    /// `key = value` config file; flags override its entries
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare reverse-mode gradients with central differences
    Gradcheck(GradcheckArgs),
    /// Check forward merge and SGD trajectory equivalence of a two-branch block
    MergeVerify(CslaArgs),
    /// Export the per-offset effective learning-rate field
    LrField(CslaArgs),
    /// Export the distance-decay prior
    Prior(PriorArgs),
    /// Export the modulation mask of a freshly initialized generator
    Mask(MaskArgs),
    /// Probe the effective receptive field of a layer stack or checkpoint
    Erf(ErfArgs),
    /// Train the toy encoder on the synthetic sphere task
    TrainToy(TrainArgs),
    /// Bake masks into kernels and check the folded model's outputs
    Fold(FoldArgs),
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// conv, lrbm, block or all [default: all]
    #[arg(long)]
    pub scope: Option<String>,
    /// Relative-error tolerance [default: 1e-6]
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Args)]
pub struct CslaArgs {
    /// Large kernel size [default: 7]
    #[arg(long)]
    pub k_l: Option<usize>,
    /// Small kernel size [default: 3]
    #[arg(long)]
    pub k_s: Option<usize>,
    /// Large-branch scale [default: 1]
    #[arg(long)]
    pub alpha_l: Option<f64>,
    /// Small-branch scale [default: 1]
    #[arg(long)]
    pub alpha_s: Option<f64>,
    /// Large-branch learning rate [default: 0.0002]
    #[arg(long)]
    pub lambda_l: Option<f64>,
    /// Small-branch learning rate [default: 0.0006]
    #[arg(long)]
    pub lambda_s: Option<f64>,
    /// derived-alpha-squared or as-written (alias as-written-eq11)
    #[arg(long)]
    pub field_convention: Option<String>,
    /// Channels of the random instance [default: 2]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Seed of the random instance [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Edge length of the random input volume [default: 8]
    #[arg(long)]
    pub volume: Option<usize>,
    /// SGD steps in the trajectory check [default: 10]
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct PriorArgs {
    /// Kernel size [default: 7]
    #[arg(long)]
    pub k: Option<usize>,
    /// Decay parameter β [default: 0.001]
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Args)]
pub struct MaskArgs {
    /// Kernel size [default: 7]
    #[arg(long)]
    pub k: Option<usize>,
    /// Decay parameter β [default: 0.001]
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Generator layers, 1 to 3 [default: 2]
    #[arg(long)]
    pub generator_depth: Option<usize>,
    /// Generator kernel size [default: 7]
    #[arg(long)]
    pub generator_kernel: Option<usize>,
    /// zero-generator or random [default: zero-generator]
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct ErfArgs {
    /// Layer list such as `ones3,ones3` or `uniform7@0.05`; ignored with --checkpoint
    #[arg(long)]
    pub spec: Option<String>,
    /// Checkpoint bundle to probe instead of a layer list
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Encoder stage probed in a checkpoint [default: 0]
    #[arg(long)]
    pub stage: Option<usize>,
    /// Channels of a layer-list model [default: 1]
    #[arg(long)]
    pub channels: Option<usize>,
    /// Odd edge length of the probe volume [default: 9]
    #[arg(long)]
    pub volume: Option<usize>,
    /// Random inputs averaged [default: 32]
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Support threshold relative to the peak [default: 0]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Axis normal to the exported slice [default: 0]
    #[arg(long)]
    pub axis: Option<usize>,
    /// GELU between layers of a layer-list model
    #[arg(long)]
    pub gelu: bool,
    /// Fail unless the support is exactly an N³ cube
    #[arg(long)]
    pub expect_extent: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// vanilla, fixed, lrbm or all [default: all]
    #[arg(long)]
    pub arm: Option<String>,
    /// [default: 600]
    #[arg(long)]
    pub steps: Option<usize>,
    /// First seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds [default: 1]
    #[arg(long)]
    pub seeds: Option<u64>,
    /// [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning rate of β and generator tensors [default: --lr]
    #[arg(long)]
    pub generator_lr: Option<f64>,
    /// Encoder kernel size [default: 7]
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// Write real wall times to the curve CSVs instead of zeros
    #[arg(long)]
    pub include_wall: bool,
    /// Exit 1 if the three-arm ordering does not hold
    #[arg(long)]
    pub check_ordering: bool,
}

#[derive(Args)]
pub struct FoldArgs {
    /// Checkpoint bundle; without it a fresh lrbm model is built from the config
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the fresh model and the test input [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out;
    let config = cli.config.as_deref();
    let result = match cli.command {
        Command::Gradcheck(a) => commands::gradcheck(out, config, a),
        Command::MergeVerify(a) => commands::merge_verify(out, config, a),
        Command::LrField(a) => commands::lr_field(out, config, a),
        Command::Prior(a) => commands::prior(out, config, a),
        Command::Mask(a) => commands::mask(out, config, a),
        Command::Erf(a) => commands::erf(out, config, a),
        Command::TrainToy(a) => commands::train_toy(out, config, a),
        Command::Fold(a) => commands::fold(out, config, a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
