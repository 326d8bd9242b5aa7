//! `eunet`: train EU-Net models on synthetic data, render salience maps,
//! and compare uncertainty estimates.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};
use eunet_core::Exec;

#[derive(Parser)]
#[command(
    name = "eunet",
    version,
    about = "EU-Net segmentation, salience and uncertainty on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Seed for model initialisation and training order.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ModelFlags {
    #[arg(long, value_parser = ["unet", "unetpp"])]
    backbone: Option<String>,
    /// Attach MHEX+ blocks to the decoder stages.
    #[arg(long, conflicts_with = "no_mhex")]
    mhex: bool,
    #[arg(long)]
    no_mhex: bool,
    #[arg(long, value_parser = ["ce", "dice"])]
    loss: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as PGM images and masks.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the synthetic dataset; writes a checkpoint and the history.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// MHEX+ CAMs and Grad-CAM maps for one image.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Greyscale PGM input.
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "class")]
        class: usize,
        /// Decoder stage `1..L`, or `all`.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Collaboration and ensemble uncertainty maps, optionally compared.
    Uncert {
        #[command(flatten)]
        common: Common,
        /// EU-Net checkpoint for the collaboration map.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ensemble member checkpoints.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ensemble: Vec<PathBuf>,
        #[arg(long, value_parser = ["mhex", "ensemble", "both"], default_value = "both")]
        method: String,
        /// Single PGM image instead of the synthetic dataset.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Number of dataset samples to evaluate.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time equivalent-kernel preparation against Grad-CAM.
    BenchCam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
    },
}

/// Failure classes with fixed exit codes.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Diverged(String),
    BadClass(String),
    Structural(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::BadClass(_) => 4,
            Failure::Structural(_) => 5,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "config error: {m}"),
            Failure::Diverged(m) => write!(f, "training diverged: {m}"),
            Failure::BadClass(m) => write!(f, "bad class: {m}"),
            Failure::Structural(m) => write!(f, "unsupported model: {m}"),
            Failure::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<eunet_core::Error> for Failure {
    fn from(e: eunet_core::Error) -> Self {
        match e {
            eunet_core::Error::Diverged { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

/// Rayon pool size from `EUNET_THREADS` (default 1).
fn thread_count() -> Result<usize, Failure> {
    match std::env::var("EUNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Config(format!(
                "EUNET_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

fn resolve(common: &Common, model: Option<&ModelFlags>, exec: Exec) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(m) = model {
        if let Some(b) = &m.backbone {
            cfg.set("backbone", b)?;
        }
        if m.mhex {
            cfg.model.with_mhex = true;
        }
        if m.no_mhex {
            cfg.model.with_mhex = false;
        }
        if let Some(l) = &m.loss {
            cfg.set("loss", l)?;
        }
    }
    cfg.uncertainty.exec = exec;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = thread_count()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Other(e.into()))?;
    let exec = if threads > 1 { Exec::Parallel } else { Exec::Sequential };
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common, None, exec)?;
            commands::generate(&cfg, &common.out)
        }
        Command::Train { common, model } => {
            let cfg = resolve(&common, Some(&model), exec)?;
            commands::train(&cfg, &common.out)
        }
        Command::Explain {
            common,
            checkpoint,
            image,
            class,
            stage,
        } => {
            let cfg = resolve(&common, None, exec)?;
            commands::explain(&cfg, &common.out, &checkpoint, &image, class, &stage)
        }
        Command::Uncert {
            common,
            checkpoint,
            ensemble,
            method,
            image,
            samples,
        } => {
            let mut cfg = resolve(&common, None, exec)?;
            if let Some(n) = samples {
                cfg.samples = n;
            }
            let request = commands::UncertRequest {
                checkpoint,
                ensemble,
                method,
                image,
            };
            commands::uncert(&cfg, &common.out, &request)
        }
        Command::BenchCam {
            common,
            checkpoint,
            sizes,
        } => {
            let cfg = resolve(&common, None, exec)?;
            commands::bench_cam(&cfg, &common.out, checkpoint.as_deref(), &sizes)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("eunet: {f}");
            ExitCode::from(f.code())
        }
    }
}
