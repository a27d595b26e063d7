use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use porous_pinn::harness::manifest::{load_problem, parse_manifest};
use porous_pinn::harness::{
    compare_runs, export::REPORT, export_oracle, load_manifest_with, ErrorReport, EvaluationConfig,
    Mode, Overrides, RunStatus,
};
use porous_pinn::Error;

/// PINN solver for 1D two-phase flow in porous media.
///
/// Point-batch evaluation uses all cores by default; set RAYON_NUM_THREADS
/// to limit it (use 1 for bit-reproducible runs across machines).
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write the run directory.
    Run {
        /// Manifest file; omitted blocks fall back to defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the reports of two run directories.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Write the closed-form front and pressure.
    Oracle {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Writes to stdout; a closed pipe is not an error for the run itself.
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn execute(command: Command) -> porous_pinn::Result<u8> {
    match command {
        Command::Run {
            config,
            mode,
            seed,
            out,
        } => {
            let overrides = Overrides { mode, seed, out };
            let manifest = match config {
                Some(path) => load_manifest_with(&path, &overrides)?,
                None => parse_manifest("", &overrides)?,
            };
            let report = porous_pinn::harness::run_experiment(&manifest)?;
            emit(&toml::to_string(&report).expect("report serializes"));
            if report.status == RunStatus::Diverged {
                eprintln!(
                    "training diverged: {}",
                    report.failure.as_deref().unwrap_or("non-finite cost")
                );
                return Ok(EXIT_DIVERGED);
            }
            Ok(0)
        }
        Command::Compare { a, b } => {
            let ra = ErrorReport::read(&a.join(REPORT))?;
            let rb = ErrorReport::read(&b.join(REPORT))?;
            emit(&compare_runs(&ra, &rb)?.to_string());
            Ok(0)
        }
        Command::Oracle { config, out } => {
            let problem = match config {
                Some(path) => load_problem(&path)?,
                None => Default::default(),
            };
            export_oracle(&problem, &EvaluationConfig::default(), &out)?;
            Ok(0)
        }
    }
}
