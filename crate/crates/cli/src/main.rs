//! `dgp`: fit, predict, acquire, campaign and selfcheck over flat CSV files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dgp_core::{Criterion, Error, LatentMode};

#[derive(Parser, Debug)]
#[command(name = "dgp", version, about = "Deep Gaussian process surrogates and active learning")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress summaries on standard output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ModelFlags {
    /// Flat TOML config; any key can also be given with --set or a flag.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    layers: Option<u8>,
    /// Latent nodes per layer.
    #[arg(long)]
    p: Option<usize>,
    /// Fix the nugget at its floor (interpolation).
    #[arg(long)]
    deterministic: bool,
    /// Override any config key, e.g. `--set iters=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to a training file (inputs then response) and save it.
    Fit {
        #[arg(long = "in")]
        input: PathBuf,
        /// Model directory to create.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Posterior predictive mean, variance and 90% intervals at test inputs.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// How test inputs are pushed through the latent layers.
        #[arg(long, default_value = "sample")]
        latent: LatentMode,
        /// Predict the latent function rather than a new noisy response.
        #[arg(long)]
        noise_free: bool,
    },
    /// Evaluate an acquisition criterion over candidate inputs.
    Acquire {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Criterion surface, one row per candidate.
        #[arg(long)]
        out: PathBuf,
        /// Single-row file with the selected candidate.
        #[arg(long)]
        choice: PathBuf,
        #[arg(long, default_value = "alc")]
        criterion: Criterion,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run a sequential design campaign from a config file.
    Campaign {
        /// History file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        criterion: Option<Criterion>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Compare the fast numerical paths against brute-force references.
    Selfcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the Monte Carlo check.
        #[arg(long)]
        quick: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let quiet = cli.quiet;
    let result = match cli.command {
        Command::Fit { input, out, model } => commands::fit(&input, &out, &model, quiet),
        Command::Predict {
            model,
            input,
            out,
            seed,
            latent,
            noise_free,
        } => commands::predict(&model, &input, &out, seed, latent, noise_free),
        Command::Acquire {
            model,
            input,
            out,
            choice,
            criterion,
            seed,
        } => commands::acquire(&model, &input, &out, &choice, criterion, seed, quiet),
        Command::Campaign { out, criterion, model } => commands::campaign(&out, criterion, &model, quiet),
        Command::Selfcheck { config, seed, quick, set } => {
            commands::selfcheck(config.as_deref(), seed, quick, &set, quiet)
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
