use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Marks errors caused by bad flags, inputs or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "icppl", version, about = "Simulate, train, infer and inspect instrumented models")]
struct Cli {
    /// Worker threads for simulation and particle work. Outputs do not
    /// depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GenerateMode {
    Prior,
    Record,
}

#[derive(Subcommand)]
enum Command {
    /// Write prior or record-mode traces as JSONL.
    Generate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "prior")]
        mode: GenerateMode,
        /// Tau toy configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw one observation from the prior predictive; prints the latent
    /// predicts that produced it.
    Simulate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train an inference network on simulated record-mode traces.
    Train {
        #[arg(long)]
        model: String,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 10.0)]
        clip: f64,
        /// Prior runs used to find heads and observation scales.
        #[arg(long, default_value_t = 1000)]
        discovery_runs: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Importance sampling, optionally guided by a trained network.
    Infer {
        #[arg(long)]
        model: String,
        #[arg(long)]
        observation: PathBuf,
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long)]
        particles: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Succession graph, statistics and hotspot report for a trace file.
    Inspect {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        dot: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[arg(long, default_value_t = 1.1)]
        threshold: f64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            model,
            n,
            seed,
            out,
            mode,
            config,
        } => commands::generate(&model, config.as_deref(), n, seed, &out, mode),
        Command::Simulate {
            model,
            seed,
            out,
            config,
        } => commands::simulate(&model, config.as_deref(), seed, &out),
        Command::Train {
            model,
            steps,
            seed,
            out,
            batch_size,
            lr,
            clip,
            discovery_runs,
            config,
        } => commands::train(
            &model,
            config.as_deref(),
            &out,
            discovery_runs,
            icppl::net::TrainingConfig {
                batch_size,
                learning_rate: lr,
                grad_clip_norm: clip,
                steps,
                master_seed: seed,
            },
        ),
        Command::Infer {
            model,
            observation,
            net,
            particles,
            seed,
            out,
        } => commands::infer(&model, &observation, net.as_deref(), particles, seed, &out),
        Command::Inspect {
            traces,
            dot,
            stats,
            threshold,
        } => commands::inspect(&traces, &dot, &stats, threshold),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match cli.threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(usage) = e.downcast_ref::<UsageError>() {
                eprintln!("error: {usage}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
