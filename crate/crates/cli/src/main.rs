use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use miranda_cli::{commands, ExperimentConfig};

#[derive(Parser)]
#[command(name = "miranda", version, about = "Phenology regression under climatic distribution shift")]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Replaces the seed list (run) or the synthetic dataset seed (generate).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV and print its shift statistics
    Generate {
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every method and seed, then write cells.csv and report.txt
    Run {
        /// Output directory; overrides `output_dir`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent runs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on the configured test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scatter CSV path
        #[arg(long, default_value = "scatter.csv")]
        out: PathBuf,
    },
    /// Re-aggregate cells.csv of an output directory
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match try_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Generate { out } => {
            if let (Some(seed), Some(d)) = (cli.seed, cfg.dataset.synthetic.as_mut()) {
                d.seed = seed;
            }
            print!("{}", commands::generate(&cfg, &out)?);
        }
        Command::Run { out, jobs } => {
            if let Some(seed) = cli.seed {
                cfg.seeds = vec![seed];
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let outcome = commands::run(&cfg, &out, jobs)?;
            print!("{}", outcome.report);
            for f in &outcome.failures {
                eprintln!("failed: {f}");
            }
            if !outcome.failed_methods.is_empty() {
                eprintln!("every run failed for: {}", outcome.failed_methods.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Eval { checkpoint, out } => {
            print!("{}", commands::eval(&cfg, &checkpoint, &out)?);
        }
        Command::Report { out } => print!("{}", commands::report(&out)?),
    }
    Ok(ExitCode::SUCCESS)
}
