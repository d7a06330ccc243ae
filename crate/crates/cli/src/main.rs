//! `minet` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use minet::config::RunConfig;
use minet::nn::{ArchId, HeadKind};

#[derive(Parser)]
#[command(name = "minet", version, about = "Dense CNN training toolkit for small image datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    /// k-fold cross validation over every fold.
    Cv,
    /// Train once, holding out fold 0.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Val,
}

/// Flags shared by every command. Values given here override the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<ArchId>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long = "lr-max")]
    lr_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `off` keeps the learning rate constant at lr-max.
    #[arg(long = "one-cycle")]
    one_cycle: Option<Switch>,
    /// Short-side resize before cropping.
    #[arg(long)]
    resize: Option<usize>,
    /// Square crop fed to the network.
    #[arg(long)]
    crop: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root (`<root>/<class>/<image>`).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Overrides {
    /// Config file (or `base`, or defaults) with flag overrides applied.
    pub fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(v) = self.arch {
            cfg.arch = v;
        }
        if let Some(v) = self.classes {
            cfg.classes = v;
        }
        if let Some(v) = self.head {
            cfg.head = v;
        }
        if let Some(v) = self.lr_max {
            cfg.lr_max = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.one_cycle {
            cfg.one_cycle = v == Switch::On;
        }
        if let Some(v) = self.resize {
            cfg.resize = v;
        }
        if let Some(v) = self.crop {
            cfg.crop = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.to_string_lossy().into_owned();
        }
        if let Some(v) = &self.data {
            cfg.data = v.to_string_lossy().into_owned();
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Count images per class and write the manifest.
    Scan {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Print the trainable parameter count with a per-layer breakdown.
    Params {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Run the learning-rate range test.
    LrFind {
        #[command(flatten)]
        opts: Overrides,
    },
    /// Train with the one-cycle policy, cross-validated or on one split.
    Train {
        #[arg(long, value_enum, default_value = "cv")]
        mode: TrainMode,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Evaluate a checkpoint and write the metrics report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which samples to score, relative to the checkpoint's fold.
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Print class probabilities for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        image: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Write a synthetic colored-shapes dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[command(flatten)]
        opts: Overrides,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Scan { opts } => commands::scan(&opts),
        Command::Params { opts } => commands::params(&opts),
        Command::LrFind { opts } => commands::lr_find(&opts),
        Command::Train { mode, opts } => commands::train(&opts, mode),
        Command::Eval {
            checkpoint,
            subset,
            opts,
        } => commands::eval(&opts, &checkpoint, subset),
        Command::Predict {
            checkpoint,
            image,
            opts,
        } => commands::predict(&opts, &checkpoint, &image),
        Command::Synth { count, size, opts } => commands::synth(&opts, count, size),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
