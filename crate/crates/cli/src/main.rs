//! `pdae`: train, evaluate and sample diffusion autoencoders from the
//! command line. Every subcommand writes a run directory holding the
//! resolved configuration, a manifest and its outputs.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pdae", version, about = "Diffusion autoencoding on top of a frozen pretrained denoiser")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// No training progress on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train the noise predictor with the unweighted loss.
    Pretrain,
    /// Train the encoder and gradient estimator on a frozen denoiser.
    PdaeTrain {
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Train the denoiser over semantic codes.
    LatentTrain {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write the semantic codes of the dataset.
    Encode {
        #[arg(long)]
        model: PathBuf,
    },
    /// Reconstruct images from their codes, from inferred and random x_T.
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
    },
    /// Infer x_T of images by running the deterministic sampler backwards.
    Invert {
        #[arg(long)]
        model: PathBuf,
    },
    /// Interpolate between two dataset images.
    Interpolate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        a: usize,
        #[arg(long, default_value_t = 1)]
        b: usize,
        #[arg(long, default_value_t = 9)]
        points: usize,
        #[arg(long, value_enum, default_value_t = Interp::Latent)]
        mode: Interp,
    },
    /// Move images along a linear-classifier direction in code space.
    Manipulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value = "-3,-1.5,0,1.5,3", allow_hyphen_values = true)]
        scales: String,
        /// Decode from seeded noise instead of the inferred x_T.
        #[arg(long)]
        random_xt: bool,
    },
    /// Unconditional samples: codes from the latent denoiser, then guided
    /// decoding for the guided fraction of steps.
    SampleUncond {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Also sample with the pretrained denoiser alone.
        #[arg(long)]
        baseline: bool,
    },
    /// Class-conditional samples by rejection on a code classifier.
    SampleFewshot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        class: usize,
        /// Use only this many labelled images of the class as positives.
        #[arg(long)]
        positives: Option<usize>,
    },
    /// Label-guided samples at several guidance scales.
    SampleTruncation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        label: usize,
        #[arg(long, default_value = "0,0.5,1,1.5,2,2.5,3")]
        scales: String,
    },
    /// Gap curves and one-step reconstructions of a trained model.
    MeasureGap {
        #[arg(long)]
        model: PathBuf,
    },
    /// Shortest stage whose label guidance alone reaches the accuracy threshold.
    GridSearch {
        #[arg(long)]
        model: PathBuf,
        /// Evaluate every stage instead of stopping at the first hit length.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Write the noise schedule and loss weights as CSV.
    DumpSchedule,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Interp {
    /// Guide with the gradient at the interpolated code.
    Latent,
    /// Interpolate the two guidance gradients.
    Direction,
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::Pretrain => "pretrain",
            Cmd::PdaeTrain { .. } => "pdae-train",
            Cmd::LatentTrain { .. } => "latent-train",
            Cmd::Encode { .. } => "encode",
            Cmd::Reconstruct { .. } => "reconstruct",
            Cmd::Invert { .. } => "invert",
            Cmd::Interpolate { .. } => "interpolate",
            Cmd::Manipulate { .. } => "manipulate",
            Cmd::SampleUncond { .. } => "sample-uncond",
            Cmd::SampleFewshot { .. } => "sample-fewshot",
            Cmd::SampleTruncation { .. } => "sample-truncation",
            Cmd::MeasureGap { .. } => "measure-gap",
            Cmd::GridSearch { .. } => "grid-search",
            Cmd::DumpSchedule => "dump-schedule",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run::execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("pdae {}: {e}", cli.cmd.name());
            ExitCode::FAILURE
        }
    }
}
