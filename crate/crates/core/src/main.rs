use std::path::PathBuf;
use std::process::ExitCode;

use bruf::harness::{self, exit_code, ConfigError, ExperimentConfig, Scenario};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bruf", version, about = "Recursive-update filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Linear equivalence sweeps against the Kalman update.
    TheoremCheck(RunArgs),
    /// Single update on the range example, with grid oracle.
    RangeDemo(RunArgs),
    /// Monte Carlo radar tracking.
    Tracking(RunArgs),
    /// Lorenz '96 ensemble-size and exponent sweeps.
    Lorenz96(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to BRUF_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn threads_from_env() -> Result<Option<usize>, ConfigError> {
    match std::env::var(harness::THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| ConfigError {
            line: 0,
            message: format!("{} must be a positive integer, got '{v}'", harness::THREADS_ENV),
        }),
        Err(_) => Ok(None),
    }
}

fn run(scenario: Scenario, args: RunArgs) -> Result<i32, harness::HarnessError> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if config.scenario != scenario {
        return Err(ConfigError {
            line: 0,
            message: format!(
                "config is for '{}' but the command is '{scenario}'",
                config.scenario
            ),
        }
        .into());
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    let threads = match args.threads {
        Some(t) => Some(t),
        None => threads_from_env()?,
    };
    let out = config.output_dir.clone();
    let (artifacts, code) = harness::execute(&config, threads, &out)?;
    for line in &artifacts.summary {
        println!("{line}");
    }
    println!("wrote {} files to {}", artifacts.files.len() + 1, out.display());
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, args) = match cli.command {
        Command::TheoremCheck(a) => (Scenario::TheoremCheck, a),
        Command::RangeDemo(a) => (Scenario::RangeDemo, a),
        Command::Tracking(a) => (Scenario::Tracking, a),
        Command::Lorenz96(a) => (Scenario::Lorenz96, a),
    };
    let code = match run(scenario, args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    if code == exit_code::BREACH {
        eprintln!("tolerance exceeded");
    }
    ExitCode::from(code as u8)
}
