mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

/// Train and deploy spectrum-bounded neural ODE surrogates for stiff systems.
#[derive(Parser)]
#[command(name = "stiffnode", version, about)]
struct Cli {
    /// Worker threads for batch parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ground-truth dataset for a built-in problem.
    GenData {
        /// weakly-nonlinear | robertson | ks
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 1000)]
        n_traj: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Gaussian noise level relative to per-component data std.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Nonlinearity strength for the weakly nonlinear problem.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file or preset name.
    Train {
        /// Path to a TOML config, or a preset name (weakly-nonlinear-eps0,
        /// weakly-nonlinear-eps1, robertson, robertson-ae, ks-20, ks-7,
        /// ablation).
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Override the dataset path from the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll a trained model forward from an initial condition.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated initial condition in original coordinates.
        #[arg(long)]
        ic: String,
        /// log:a:b:n | lin:a:b:n | dataset:path | empty
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Additional statistics: "pdf" adds the joint-derivative histogram
        /// overlap.
        #[arg(long)]
        stats: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 12-cell Lipschitz/initialization sweep.
    Ablate {
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            std::process::exit(commands::EXIT_USAGE);
        }
    }

    let result = match &cli.command {
        Command::GenData { problem, n_traj, seed, noise, epsilon, out } => {
            commands::gen_data(problem, *n_traj, *seed, *noise, *epsilon, out)
        }
        Command::Train { config, out, dataset } => {
            commands::train(config, out, dataset.as_deref())
        }
        Command::Predict { checkpoint, ic, grid, out } => {
            commands::predict(checkpoint, ic, grid, out)
        }
        Command::Eval { checkpoint, dataset, stats, out } => {
            let pdf = matches!(stats.as_deref(), Some("pdf"));
            if let Some(s) = stats.as_deref() {
                if s != "pdf" {
                    eprintln!("error: unknown stats option {s} (expected: pdf)");
                    std::process::exit(commands::EXIT_USAGE);
                }
            }
            commands::eval(checkpoint, dataset, pdf, out)
        }
        Command::Ablate { config, out, dataset } => {
            commands::ablate(config, out, dataset.as_deref())
        }
    };

    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
