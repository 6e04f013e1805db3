use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eki::harness::{parse_config, run_experiment, ExperimentKind, HarnessError};

#[derive(Parser)]
#[command(name = "eki", version, about = "Run ensemble Kalman inversion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Stochastic replicates, run in parallel (overrides `sim.replicates`).
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// List the registered experiments.
    List,
}

fn init_threads() -> Result<(), HarnessError> {
    let Ok(raw) = std::env::var("EKI_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        eki::harness::ConfigError::new("EKI_THREADS", format!("expected a positive integer, got {raw:?}"))
    })?;
    // fails only if a pool already exists, which cannot happen this early
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn run(
    config: PathBuf,
    output: Option<PathBuf>,
    seed: Option<u64>,
    replicates: Option<usize>,
) -> Result<bool, HarnessError> {
    init_threads()?;
    let mut cfg = parse_config(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = replicates {
        cfg.sim.replicates = r;
    }
    let dir = output.unwrap_or_else(|| cfg.output_dir());
    let summary = run_experiment(&cfg, &dir)?;
    for (name, ok) in &summary.checks {
        println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    println!("{}: {} ({})", summary.experiment, if summary.passed { "PASS" } else { "FAIL" }, dir.display());
    Ok(summary.passed)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::List => {
            for kind in ExperimentKind::ALL {
                println!("{:<24}{}", kind.name(), kind.description());
            }
            ExitCode::SUCCESS
        }
        Command::Run { config, output, seed, replicates } => match run(config, output, seed, replicates) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => ExitCode::from(1),
            Err(e) => {
                eprintln!("{}", e.to_json());
                ExitCode::from(2)
            }
        },
    }
}
