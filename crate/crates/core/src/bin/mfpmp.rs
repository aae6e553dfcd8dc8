use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use mfpmp::cli::{parse_scenario, run, Command};
use mfpmp::Error;

#[derive(Parser)]
#[command(name = "mfpmp", version, about = "Optimal control of particle clouds: simulation, transport and optimality checks")]
struct Args {
    command: Cmd,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "mfpmp_out")]
    out: PathBuf,
    /// Overrides the scenario's time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the JSON report instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(ValueEnum, Clone, Copy)]
enum Cmd {
    /// Forward run, writes the trajectory CSV.
    Simulate,
    /// W1 and W2 between the initial and target measures.
    Ot,
    /// First-order needle values over a (value, time) grid.
    Needle,
    /// Forward and backward run with K-constancy and Hamiltonian reports.
    Extremal,
    /// Full optimality report on the scenario's control.
    Check,
    /// Descent from the scenario's control, then the full check on the result.
    Optimize,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Ot => Command::Ot,
            Cmd::Needle => Command::Needle,
            Cmd::Extremal => Command::Extremal,
            Cmd::Check => Command::Check,
            Cmd::Optimize => Command::Optimize,
        }
    }
}

/// `MFPMP_THREADS` caps the worker pool; 0 or unset means automatic.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("MFPMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("MFPMP_THREADS={v} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let mut scenario = match parse_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(dt) = args.dt {
        scenario.dt = dt;
    }
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let prepared = match scenario.prepare() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(args.command.into(), &prepared, &args.out) {
        Ok(report) => {
            if args.json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.text());
            }
            for c in report.violated() {
                eprintln!("violated: {} (value {:.3e}, tolerance {:.1e}) {}", c.name, c.value, c.tolerance, c.detail);
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Scenario(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
