use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use divmotion::commands;
use divmotion::config::{CoefficientKind, DivLossKind, Method, RunConfig};

#[derive(Parser)]
#[command(
    name = "divmotion",
    about = "Diverse skeleton-motion prediction: synthetic data, two-stage training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Key-value configuration file; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed split into per-stage streams.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of predictions per input at evaluation time.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Sampling method: random, dlow, or auxiliary.
    #[arg(long, global = true)]
    method: Option<String>,

    /// Coefficient sampling: gumbel, uniform, or gaussian.
    #[arg(long, global = true)]
    coeff: Option<String>,

    /// Skip the Gaussian-bank networks and split point rows directly.
    #[arg(long, global = true)]
    bypass_gamma: bool,

    /// Diversity loss: hinge or energy.
    #[arg(long, global = true)]
    div_loss: Option<String>,

    /// Output directory for checkpoints, logs, and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate and persist the synthetic multimodal dataset.
    GenData,
    /// Pretrain the CVAE generator.
    TrainCvae,
    /// Train the sampling stage (auxiliary or dlow) against the frozen CVAE.
    TrainSampler,
    /// Evaluate one method over the test split.
    Evaluate,
    /// Evaluate all three methods side by side.
    Compare,
    /// Export the 2-D PCA projection of many predictions for one input.
    Project,
}

fn build_config(cli: &Cli) -> divmotion::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.k_eval = k;
    }
    if let Some(m) = &cli.method {
        cfg.method = Method::parse(m)?;
    }
    if let Some(c) = &cli.coeff {
        cfg.hyper.coeff = CoefficientKind::parse(c)?;
    }
    if cli.bypass_gamma {
        cfg.hyper.bypass_gamma = true;
    }
    if let Some(d) = &cli.div_loss {
        cfg.hyper.div_loss = DivLossKind::parse(d)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> divmotion::Result<()> {
    let cfg = build_config(cli)?;
    match cli.cmd {
        Cmd::GenData => commands::cmd_gen_data(&cfg)?,
        Cmd::TrainCvae => {
            commands::cmd_train_cvae(&cfg)?;
        }
        Cmd::TrainSampler => {
            commands::cmd_train_sampler(&cfg)?;
        }
        Cmd::Evaluate => {
            commands::cmd_evaluate(&cfg)?;
        }
        Cmd::Compare => {
            commands::cmd_compare(&cfg)?;
        }
        Cmd::Project => {
            commands::cmd_project(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
