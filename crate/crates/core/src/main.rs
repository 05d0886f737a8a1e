use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use condtest::cli::{run_invert, run_power, run_simulate, run_test, Overrides, RunConfig};
use condtest::Error;

/// Conditional randomization tests for experiments with interference.
#[derive(Debug, Parser)]
#[command(name = "condtest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Test a contrast null over repeated focal-set draws.
    Test(Common),
    /// Point estimates and confidence intervals by test inversion.
    Invert(Common),
    /// Paired power curves for two focal-selection mechanisms.
    Power(Common),
    /// Write a synthetic two-stage data set.
    Simulate(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (.toml or .json).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of focal-set draws.
    #[arg(long)]
    draws: Option<usize>,
    /// Monte Carlo replicates per test.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Write completed draws before reporting a failed one.
    #[arg(long)]
    keep_partial: bool,
    /// Worker threads (defaults to all cores).
    #[arg(long, env = "CONDTEST_THREADS")]
    threads: Option<usize>,
}

fn execute(command: Command) -> Result<(), Error> {
    let (Command::Test(c) | Command::Invert(c) | Command::Power(c) | Command::Simulate(c)) = &command;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut config = RunConfig::load(&c.config)?;
    config.apply(&Overrides { seed: c.seed, draws: c.draws, replicates: c.replicates, alpha: c.alpha });
    match &command {
        Command::Test(_) => {
            let r = run_test(&config, &c.out_dir, c.keep_partial)?;
            println!("rejected {}/{} draws at alpha {}", r.rejections, r.draws, r.alpha);
        }
        Command::Invert(_) => {
            let r = run_invert(&config, &c.out_dir, c.keep_partial)?;
            let median = r.tau_hat.map_or(f64::NAN, |q| q.median);
            println!("median estimate {median:.4}, mean interval width {:.4}", r.mean_width);
        }
        Command::Power(_) => {
            let rows = run_power(&config, &c.out_dir)?;
            println!("wrote {} power rows", rows.len());
        }
        Command::Simulate(_) => {
            let d = run_simulate(&config, &c.out_dir)?;
            println!("wrote {} units", d.population.n_units());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
