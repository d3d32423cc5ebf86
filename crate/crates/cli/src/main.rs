use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cli::{load_config, run, RunError};

/// Solves the configured experiment and writes `trajectories.csv`,
/// `summary.json` and `phase_portrait.csv` into the output directory.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's search seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's outer search iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Also writes the assembled constraint listing to `program.txt`.
    #[arg(long)]
    dump_program: bool,
}

/// Exit codes by failure category: 1 config, 2 solve, 3 output.
fn exit_code(err: &RunError) -> u8 {
    match err {
        RunError::Config(_) => 1,
        RunError::Solve { .. } => 2,
        RunError::Io { .. } => 3,
    }
}

fn category(err: &RunError) -> &'static str {
    match err {
        RunError::Config(_) => "config error",
        RunError::Solve { .. } => "solve error",
        RunError::Io { .. } => "output error",
    }
}

fn main() -> ExitCode {
    let args = Args::parse();

    if let Ok(threads) = std::env::var("SISDP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                // A second initialization (only possible in-process, e.g.
                // tests) keeps the existing pool.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("config error: SISDP_THREADS: expected a positive integer, got {threads:?}");
                return ExitCode::from(1);
            }
        }
    }

    let mut cfg = match load_config(&args.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        cfg.algorithm.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(iters) = args.max_iters {
        cfg.algorithm.max_iters = iters;
    }

    match run(&cfg, args.dump_program) {
        Ok(artifacts) => {
            println!("artifacts written to {}", artifacts.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}: {e}", category(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
