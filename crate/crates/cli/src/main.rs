//! `xsplain`: generate data, train, disentangle, explain and evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xsplain_core::splat_io::ShapeClass;

use crate::commands::CliError;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "xsplain", version, about = "Interpretable voxel-aggregated splat classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate,
    /// Stage 1: train the backbone.
    Train,
    /// Stage 2: learn the rotation and prototype registry.
    Disentangle,
    /// Explain one prediction and export its fragments.
    Explain,
    /// Decision preservation, accuracy and deletion tests on the test split.
    Evaluate,
    /// Full pipeline over a grid of lambda, grid size and channel values.
    Ablate,
    /// Finite-difference checks of every gradient.
    Gradcheck,
}

#[derive(Args, Debug, Default)]
struct Flags {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 keeps runs bit-reproducible).
    #[arg(long, global = true, env = "XSPLAIN_THREADS")]
    threads: Option<usize>,
    /// Artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty dataset directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    grid_size: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    lambda_density: Option<f64>,
    #[arg(long, global = true)]
    top_m: Option<usize>,
    /// Comma-separated deletion sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    top_k_delete: Option<Vec<usize>>,
    /// Comma-separated shape classes.
    #[arg(long, global = true, value_delimiter = ',')]
    classes: Option<Vec<ShapeClass>>,
    /// Sample id to explain.
    #[arg(long, global = true)]
    sample: Option<String>,
    /// Stage-1 epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

impl Flags {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if let Some(v) = self.grid_size {
            c.hyper.grid_size = v;
        }
        if let Some(v) = self.channels {
            c.hyper.channels = v;
        }
        if let Some(v) = self.lambda_density {
            c.hyper.lambda = v;
        }
        if let Some(v) = self.top_m {
            c.hyper.top_m = v;
        }
        if let Some(v) = &self.top_k_delete {
            c.evaluate.top_k_delete = v.clone();
        }
        if let Some(v) = &self.classes {
            c.data.classes = v.clone();
        }
        if let Some(v) = &self.sample {
            c.explain.sample = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            c.stage1.epochs = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.flags.resolve()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Setup(e.to_string()))?;
    let name = format!("{:?}", cli.command).to_lowercase();
    match cli.command {
        Command::Generate => commands::generate(&cfg, cli.flags.force)?,
        Command::Train => commands::train(&cfg)?,
        Command::Disentangle => commands::disentangle(&cfg)?,
        Command::Explain => commands::explain(&cfg)?,
        Command::Evaluate => commands::evaluate(&cfg)?,
        Command::Ablate => commands::ablate(&cfg)?,
        Command::Gradcheck => commands::gradcheck(&cfg)?,
    }
    commands::echo_config(&cfg, &name)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::FAILURE
        }
    }
}
