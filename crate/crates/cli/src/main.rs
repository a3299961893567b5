use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robustgnss_cli::{cmd_simulate, cmd_solve, cmd_sweep, config, CliError};

/// Robust factor-graph GNSS positioning: simulate, solve and sweep.
#[derive(Parser)]
#[command(name = "robustgnss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario: observations.jsonl, truth.csv, faults.csv.
    Simulate(Common),
    /// Estimate a trajectory: estimate.csv, iterations.csv.
    Solve {
        #[command(flatten)]
        common: Common,
        /// JSON-lines observations; overrides io.observations.
        #[arg(long)]
        observations: Option<PathBuf>,
    },
    /// Fault-probability sweep: sweep.csv, sweep.json.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field by dotted path, e.g. robust.scheme=cauchy.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; overrides io.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, observations) = match &cli.command {
        Command::Simulate(c) | Command::Sweep(c) => (c, None),
        Command::Solve { common, observations } => (common, observations.as_deref()),
    };
    let mut cfg = config::load(&common.config, &common.set, common.seed)?;
    if let Some(out) = &common.out {
        cfg.io.output_dir = out.clone();
    }
    let written = match &cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg)?,
        Command::Solve { .. } => cmd_solve(&cfg, observations)?,
        Command::Sweep(_) => {
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(n) = common.workers {
                if n == 0 {
                    return Err(CliError::Config("--workers must be at least 1".into()));
                }
                pool = pool.num_threads(n);
            }
            let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
            pool.install(|| cmd_sweep(&cfg))?
        }
    };
    for path in written {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROBUSTGNSS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { robustgnss_cli::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("robustgnss: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
