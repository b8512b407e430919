use clap::{Parser, Subcommand};
use fluidq_cli::compare::compare_files;
use fluidq_cli::runner::{run_scenario_file, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Fluid-model solver suite for many-server queues with abandonment.
#[derive(Parser)]
#[command(name = "fluidq", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file: solve, check, and emit CSV/JSON artifacts.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Output directory for CSV and report files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Simulation seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Time-step override.
        #[arg(long)]
        dt: Option<f64>,
        /// Suppress per-task progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Compare two trajectory CSVs column by column.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Comma-separated column names, e.g. Q,B,X.
        #[arg(long, value_delimiter = ',', required = true)]
        cols: Vec<String>,
        /// Sup-norm tolerance per column.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, out, seed, dt, quiet } => {
            let opts = RunOptions { out_dir: out, seed, dt_override: dt, quiet };
            run_scenario_file(&scenario, &opts)
        }
        Command::Compare { a, b, cols, tol } => match compare_files(&a, &b, &cols, tol) {
            Ok(report) => {
                for d in &report.deviations {
                    println!(
                        "{}: sup = {:.6e}, L1 = {:.6e} ({})",
                        d.column,
                        d.sup,
                        d.l1,
                        if d.sup <= report.tolerance { "pass" } else { "fail" }
                    );
                }
                if report.pass {
                    0
                } else {
                    2
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    };
    ExitCode::from(code as u8)
}
