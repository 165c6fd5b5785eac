//! `ntkfeat`: train, build kernels, analyse and report, figure by figure.

mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, ExperimentConfig, Overrides, Preset};
use pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "ntkfeat",
    version,
    about = "Empirical NTK feature-discovery experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write checkpoints plus history.csv.
    Train(Common),
    /// Assemble (or reuse) every configured kernel at one checkpoint.
    Kernel(Common),
    /// Spectra, cliffs, heatmaps and disentanglement into fig*/ directories.
    Analyze(Common),
    /// Summarise the analysis into report.md.
    Report(Common),
    /// train, kernel, analyze and report.
    All(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config; layered over --preset when both are given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the training epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Checkpoint epoch for kernel/analyze (default: the last one).
    #[arg(long)]
    epoch: Option<usize>,
    /// Continue training from the latest checkpoint.
    #[arg(long)]
    resume: bool,
    /// Recompute everything, ignoring finished runs and cached kernels.
    #[arg(long)]
    force: bool,
    /// Print the step graph and exit.
    #[arg(long)]
    dry_run: bool,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<ntk_features::Error>() {
        Some(ntk_features::Error::Divergence { .. }) => 3,
        Some(ntk_features::Error::Corrupt { .. }) => 4,
        _ => 1,
    }
}

fn run(name: &str, c: &Common) -> anyhow::Result<()> {
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        epochs: c.epochs,
    };
    let cfg = ExperimentConfig::resolve(c.preset, c.config.as_deref(), &overrides)?;
    let pipe = Pipeline::new(cfg, c.force);

    if c.dry_run {
        println!(
            "config {} -> {}",
            pipe.out.config_hash,
            pipe.cfg.out.display()
        );
        for s in pipe.plan(name, c.epoch) {
            let deps = if s.deps.is_empty() {
                String::new()
            } else {
                format!(" <- {}", s.deps.join(", "))
            };
            println!("{:<28} [{}]{deps}", s.name, s.status);
        }
        return Ok(());
    }

    std::fs::create_dir_all(&pipe.cfg.out)?;
    pipe.out
        .write("config.toml", pipe.cfg.to_toml().as_bytes(), None, None)?;
    match name {
        "train" => {
            let s = pipe.train(c.resume)?;
            println!(
                "trained to epoch {} ({} checkpoints)",
                s.final_epoch,
                s.checkpoints.len()
            );
        }
        "kernel" => {
            for e in pipe.kernels(c.epoch)? {
                println!("{:<28} {}", e.label, e.key);
            }
        }
        "analyze" => {
            pipe.analyze(c.epoch)?;
            println!("analysis written to {}", pipe.cfg.out.display());
        }
        _ => {
            let all = name == "all";
            if all {
                pipe.train(c.resume)?;
                pipe.analyze(c.epoch)?;
            }
            print!("{}", pipe.report(all || !c.force)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Kernel(c) => ("kernel", c),
        Command::Analyze(c) => ("analyze", c),
        Command::Report(c) => ("report", c),
        Command::All(c) => ("all", c),
    };
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
