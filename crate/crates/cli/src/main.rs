use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sa_lab::{load_config, run, Command, RunOptions};

#[derive(Parser)]
#[command(name = "sa-lab", version, about = "Finite-time bounds for constant-stepsize stochastic approximation")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Verify the assumptions and the mixing envelope.
    Check(Args),
    /// Derive and print the bound constants.
    Analyze(Args),
    /// Monte Carlo mean squared error curve.
    Simulate(Args),
    /// Finite-time bound curve.
    Bound(Args),
    /// Join the Monte Carlo and bound curves.
    Compare(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    allow_diverged: bool,
    /// Constants file replacing the derived constants (bound, compare).
    #[arg(long)]
    constants: Option<PathBuf>,
}

fn init_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("SA_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize =
        value.trim().parse().map_err(|_| format!("SA_LAB_THREADS must be a nonnegative integer, got {value:?}"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let (command, args) = match cli.command {
        Sub::Check(a) => (Command::Check, a),
        Sub::Analyze(a) => (Command::Analyze, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Bound(a) => (Command::Bound, a),
        Sub::Compare(a) => (Command::Compare, a),
    };
    let exp = match load_config(&args.config) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions {
        seed: args.seed,
        trajectories: args.trajectories,
        steps: args.steps,
        allow_diverged: args.allow_diverged,
        constants: args.constants,
        ..RunOptions::new(args.out)
    };
    match run(command, &exp, &opts) {
        Ok(report) => {
            println!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", opts.out.join(f).display());
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
