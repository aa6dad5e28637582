use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsjepa::config::{run, ExperimentConfig};
use tsjepa::numerics::gradcheck_battery;
use tsjepa::report::render_report;

const GRADCHECK_THRESHOLD: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "tsjepa", about = "Self-supervised time-series representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Kept for scripting symmetry; runs are always deterministic.
        #[arg(long)]
        deterministic: bool,
    },
    /// Summarize every results.csv under a directory.
    Report { dir: PathBuf },
    /// Finite-difference check of every analytic gradient path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the full report to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { config, seed, out, deterministic } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if deterministic {
                cfg.deterministic = true;
            }
            let result = run(&cfg)?;
            println!("{} ({:.1}s)", result.summary, result.wall_seconds);
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir } => {
            print!("{}", render_report(&dir)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, out } => {
            let battery = gradcheck_battery(seed)?;
            let mut text = String::new();
            let mut ok = true;
            for (name, report) in &battery {
                let passed = report.passes(GRADCHECK_THRESHOLD);
                ok &= passed;
                text.push_str(&format!(
                    "{name}: max {:.3e} {}\n",
                    report.max_relative_error,
                    if passed { "ok" } else { "FAIL" }
                ));
                text.push_str(&report.render());
                text.push('\n');
            }
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(path, text)?;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
