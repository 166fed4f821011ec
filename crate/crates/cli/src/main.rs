use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mstcn_cli::commands::{self, EvalOptions, SampleOptions, TrainOptions};
use mstcn_cli::config::{model_from_arg, RunConfig};

#[derive(Parser)]
#[command(name = "mstcn", version, about = "Multiscale stochastic temporal convolutional networks")]
struct Cli {
    /// Worker threads for evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, resuming from the latest checkpoint in the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stop after this epoch even if the config asks for more.
        #[arg(long)]
        stop_at_epoch: Option<u64>,
    },
    /// Average ELBO and per-layer KL of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence file; defaults to the run's validation data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV file for the result row.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate sequences from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        prefix: Option<PathBuf>,
        /// Sequences to draw when there is no prefix.
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero latent noise and the head's mode instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        out: PathBuf,
        /// Also write a text export.
        #[arg(long)]
        text: Option<PathBuf>,
    },
    /// Parameter and multiply-accumulate counts per layer.
    Complexity {
        /// Run config path or preset name.
        #[arg(long)]
        config: String,
        /// Second config to compare against.
        #[arg(long)]
        compare: Option<String>,
        #[arg(long, default_value_t = 4000)]
        frames: usize,
    },
    /// Write a synthetic regime-switching dataset.
    Synth {
        /// TOML synthetic spec.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, stop_at_epoch } => {
            let run = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let opts = TrainOptions {
                threads: cli.threads,
                stop_at_epoch,
            };
            let s = commands::train(&run, &opts)?;
            if let Some(e) = s.resumed_from {
                println!("resumed from epoch {e}");
            }
            for r in &s.rows {
                println!("epoch {:>4} {:<5} elbo {:.4} kl {:?}", r.epoch, r.split, r.elbo, r.kl_per_layer);
            }
            println!("done: epoch {}, iteration {}", s.epoch, s.iteration);
        }
        Command::Eval { checkpoint, data, seed, out } => {
            let opts = EvalOptions {
                data,
                seed,
                out,
                threads: cli.threads,
            };
            let (e, _) = commands::eval(&checkpoint, &opts)?;
            println!("sequences {}", e.sequences);
            println!("elbo {}", e.elbo);
            println!("reconstruction {}", e.reconstruction);
            for (l, k) in e.kl_per_layer.iter().enumerate() {
                println!("kl_{} {k}", l + 1);
            }
        }
        Command::Sample {
            checkpoint,
            frames,
            prefix,
            count,
            seed,
            greedy,
            out,
            text,
        } => {
            if prefix.is_none() && count == 0 {
                bail!("--count must be positive without a prefix");
            }
            let opts = SampleOptions {
                frames,
                prefix,
                count,
                seed,
                greedy,
                out,
                text,
                threads: cli.threads,
            };
            let d = commands::sample(&checkpoint, &opts)?;
            println!("wrote {} sequences of {} samples to {}", d.len(), d.sequences[0].shape()[1], opts.out.display());
        }
        Command::Complexity { config, compare, frames } => {
            let mut models = vec![(config.clone(), model_from_arg(&config)?)];
            if let Some(c) = compare {
                models.push((c.clone(), model_from_arg(&c)?));
            }
            print!("{}", commands::complexity_report(&models, frames)?);
        }
        Command::Synth { config, out, text } => {
            let d = commands::synth(&config, &out, text.as_deref())?;
            println!("wrote {} sequences to {}", d.len(), out.display());
        }
    }
    Ok(())
}
