use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pidvae::commands::{self, EvalArgs, GenArgs, TrainArgs};
use pidvae::config::ConfigInput;

#[derive(Parser)]
#[command(name = "pidvae", version, about = "Physics-informed dynamical VAE: data generation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigFlags {
    /// lorenz, advection or kdv
    #[arg(long)]
    experiment: Option<String>,
    /// Flat `key = value` or JSON configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Setting as `key=value`; repeatable, applied after --config
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl From<ConfigFlags> for ConfigInput {
    fn from(f: ConfigFlags) -> Self {
        ConfigInput {
            experiment: f.experiment,
            file: f.config,
            seed: f.seed,
            overrides: f.overrides,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode
    Gen {
        #[command(flatten)]
        config: ConfigFlags,
        /// Episode directory to write
        #[arg(long)]
        out: PathBuf,
        /// Skip the PGM frame export
        #[arg(long)]
        no_pgm: bool,
    },
    /// Train on an episode, resuming from the latest checkpoint in --out
    Train {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        episode: PathBuf,
        /// Run directory for metrics.csv and checkpoints
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on an episode
    Eval {
        /// Checkpoint file or run directory (latest checkpoint)
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> pidvae::Result<()> {
    match cli.command {
        Command::Gen { config, out, no_pgm } => {
            let m = commands::gen(&GenArgs {
                config: config.into(),
                out: out.clone(),
                pgm: !no_pgm,
            })?;
            let y = &m.arrays["y"];
            eprintln!("wrote {} frames of {} values to {}", y.rows, y.cols, out.display());
        }
        Command::Train { config, episode, out } => {
            let outcome = commands::train(
                &TrainArgs {
                    config: config.into(),
                    episode,
                    out: out.clone(),
                },
                |r| {
                    eprintln!(
                        "epoch {:>5}  elbo {:>14.6e}  nmse {:.5}  mu {:?}  sigma {:?}",
                        r.epoch, r.elbo, r.nmse, r.mu_lambda, r.sigma_lambda
                    )
                },
            )?;
            if let Some(e) = outcome.resumed_from {
                eprintln!("resumed from epoch {e}");
            }
            eprintln!("metrics in {}", out.join(commands::METRICS_FILE).display());
        }
        Command::Eval { checkpoint, episode, out } => {
            let s = commands::eval(&EvalArgs {
                checkpoint,
                episode,
                out: out.clone(),
            })?;
            eprintln!("epoch {} nmse {:.6}", s.epoch, s.nmse);
            if let (Some(post), Some(prior)) = (s.posterior_rmse, s.prior_rmse) {
                eprintln!("state rmse: posterior {post:.4}, prior-only {prior:.4}");
            }
            eprintln!("results in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
