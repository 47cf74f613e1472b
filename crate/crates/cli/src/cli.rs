//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Endpoint, EvaluateArgs, FineTuneArgs, Run};
use crate::config::{DirPath, RunConfig};
use crate::error::CliError;
use crate::service;

#[derive(Debug, Parser)]
#[command(name = "sketchguide", version, about = "Sketch-guided diffusion on a toy shape domain")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a procedural dataset of labeled rasters.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the timestep-aware shape classifier.
    TrainClassifier {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the noise predictor.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Adapt the noise predictor to one image and sketch.
    Finetune {
        #[arg(long)]
        image: PathBuf,
        /// Defaults to the converted sketch of `--image`.
        #[arg(long)]
        sketch: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a sample grid and tensor dump.
    Sample {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode an image to its deterministic latent.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Spherical interpolation between two latents or two images.
    Interpolate {
        #[arg(long, conflicts_with = "image_a", required_unless_present = "image_a")]
        latent_a: Option<PathBuf>,
        #[arg(long, conflicts_with = "image_b", required_unless_present = "image_b")]
        latent_b: Option<PathBuf>,
        #[arg(long)]
        image_a: Option<PathBuf>,
        #[arg(long)]
        image_b: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Move an image toward a new sketch.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute FID, IS, precision and recall.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset directory used as the real set.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Dataset directory used instead of fresh samples.
        #[arg(long)]
        fake: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::TrainClassifier { .. } => "train-classifier",
            Self::Pretrain { .. } => "pretrain",
            Self::Finetune { .. } => "finetune",
            Self::Sample { .. } => "sample",
            Self::Invert { .. } => "invert",
            Self::Interpolate { .. } => "interpolate",
            Self::Edit { .. } => "edit",
            Self::Evaluate { .. } => "evaluate",
            Self::Serve { .. } => "serve",
        }
    }
}

/// Config file, then flag overrides, then the directory flags.
pub fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(d) = &common.run_dir {
        cfg.run_dir = DirPath(d.clone());
    }
    if let Some(d) = &common.model_dir {
        cfg.model_dir = DirPath(d.clone());
    }
    Ok(cfg)
}

fn endpoint(latent: Option<PathBuf>, image: Option<PathBuf>) -> Result<Endpoint, CliError> {
    match (latent, image) {
        (Some(l), None) => Ok(Endpoint::Latent(l)),
        (None, Some(i)) => Ok(Endpoint::Image(i)),
        _ => Err(CliError::Usage("give exactly one of a latent or an image per endpoint".into())),
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.common)?;
    let name = cli.command.name();
    let mut cfg = cfg;
    if let Command::Serve { port: Some(p) } = &cli.command {
        cfg.serve_port = *p;
    }
    let run = Run::start(cfg, name)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&run, out).map(drop),
        Command::TrainClassifier { data } => commands::train_classifier_cmd(&run, data.as_deref()).map(drop),
        Command::Pretrain { data } => commands::pretrain_cmd(&run, data.as_deref()).map(drop),
        Command::Finetune {
            image,
            sketch,
            model,
            out,
        } => commands::finetune_cmd(
            &run,
            FineTuneArgs {
                image,
                sketch,
                model,
                out,
            },
        )
        .map(drop),
        Command::Sample { model, out } => commands::sample_cmd(&run, model, out).map(drop),
        Command::Invert { image, model, out } => commands::invert_cmd(&run, &image, model, out).map(drop),
        Command::Interpolate {
            latent_a,
            latent_b,
            image_a,
            image_b,
            model,
            out,
        } => commands::interpolate_cmd(
            &run,
            endpoint(latent_a, image_a)?,
            endpoint(latent_b, image_b)?,
            model,
            out,
        )
        .map(drop),
        Command::Edit {
            image,
            sketch,
            model,
            out,
        } => commands::edit_cmd(&run, &image, &sketch, model, out).map(drop),
        Command::Evaluate { model, real, fake, out } => {
            commands::evaluate_cmd(&run, EvaluateArgs { model, real, fake, out }).map(drop)
        }
        Command::Serve { .. } => service::serve(run),
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::Usage(first).line());
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
