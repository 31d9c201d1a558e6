use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use scotti::metrics::{compare_runs, emit_metrics, load_report, summarize};
use scotti::verify::{gradcheck_suite, selftest, GRADCHECK_STEP, GRADCHECK_TOL};
use scotti::{load_config, run_training, Error, Result};

#[derive(Parser)]
#[command(name = "scotti", version, about = "Training with learned per-neuron freezing and FLOPs accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file and write metrics.csv, report.json and iterations.csv.
    Train {
        config: PathBuf,
        /// Overrides the config's output_dir (and SCOTTI_OUTPUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary of a finished run.
    Report { run_dir: PathBuf },
    /// Compare finished runs: FLOPs saved and final test accuracy per run.
    Compare {
        #[arg(required = true, num_args = 1..)]
        run_dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Randomized property checks of the freezing machinery.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Outcome of a command that ran but found failures.
struct ChecksFailed;

fn run(cmd: Command) -> Result<std::result::Result<(), ChecksFailed>> {
    match cmd {
        Command::Train { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            let report = run_training(&cfg)?;
            let files = emit_metrics(&report, &cfg.output_dir)?;
            print!("{}", summarize(&report));
            println!("wrote {}", files.metrics.display());
            println!("wrote {}", files.report.display());
            println!("wrote {}", files.iterations.display());
        }
        Command::Report { run_dir } => {
            print!("{}", summarize(&load_report(&run_dir)?));
        }
        Command::Compare { run_dirs, csv } => {
            let runs = run_dirs
                .iter()
                .map(|d| Ok((d.display().to_string(), load_report(d)?)))
                .collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&runs)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Gradcheck { seed, points } => {
            let results = gradcheck_suite(seed, points)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {:<22} points={} max_rel_err={:.3e} (h={GRADCHECK_STEP:e}, tol={GRADCHECK_TOL:e})",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.points,
                    r.max_rel_err
                );
                ok &= r.passed();
            }
            if !ok {
                return Ok(Err(ChecksFailed));
            }
        }
        Command::Selftest { seed } => {
            let mut ok = true;
            for r in selftest(seed)? {
                match &r.failure {
                    None => println!("PASS {} ({} trials)", r.name, r.trials),
                    Some(f) => println!("FAIL {}: {f}", r.name),
                }
                ok &= r.passed();
            }
            if !ok {
                return Ok(Err(ChecksFailed));
            }
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(ChecksFailed)) => ExitCode::from(2),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
