use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wqcp_cli::{exit_code, run_from_file, ExperimentKind, OUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "wqcp", version, about = "Drift-control solver and queue validation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify W_r trajectories over a range of shooting slopes.
    SweepWr(RunArgs),
    /// Solve for the value function and optimal feedback.
    Solve(RunArgs),
    /// Check the feedback policy against alternatives by Monte Carlo.
    VerifyDcp(RunArgs),
    /// Queue cost under the feedback policy for increasing n.
    ConvergeQcp(RunArgs),
    /// Conjugate values against a grid supremum.
    ConjugateTable(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Overrides `monte_carlo.base_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `monte_carlo.workers`.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::SweepWr(a) => (ExperimentKind::SweepWr, a),
        Command::Solve(a) => (ExperimentKind::Solve, a),
        Command::VerifyDcp(a) => (ExperimentKind::VerifyDcp, a),
        Command::ConvergeQcp(a) => (ExperimentKind::ConvergeQcp, a),
        Command::ConjugateTable(a) => (ExperimentKind::ConjugateTable, a),
    };
    if args.workers == Some(0) {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(2);
    }
    let result = run_from_file(kind, &args.config, args.out.as_deref(), args.seed, args.workers);
    match &result {
        Ok(manifest) => {
            for check in &manifest.checks {
                let verdict = if check.pass { "PASS" } else { "FAIL" };
                println!("[{verdict}] {}: {}", check.name, check.detail);
            }
            if let Some(err) = &manifest.error {
                eprintln!("error: {err}");
            }
            println!("manifest {} ({} files)", manifest.manifest_hash, manifest.files.len());
        }
        Err(err) => eprintln!("error: {err}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
