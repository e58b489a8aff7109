//! Experiment runner: loads a TOML config, executes one task, and writes
//! machine-readable artifacts (`result.json`, `surface.csv`, and
//! `report.json` for verification runs).
//!
//! Exit codes: 0 when everything passed, 1 when a verifier failed, 2 on
//! configuration errors.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::ExperimentConfig;

#[derive(Parser, Debug)]
#[command(name = "rbsde", about = "Robust backward-SDE experiment runner")]
struct Args {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the verification suite named in the config.
    #[arg(long)]
    suite: Option<String>,
    /// Output directory for result.json / surface.csv / report.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's solve mode (lattice | path).
    #[arg(long)]
    mode: Option<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(suite) = &args.suite {
        cfg.verify.suite = Some(suite.clone());
    }
    let instance = match cfg.build(args.seed, args.mode.as_deref()) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("config error: cannot create output directory: {e}");
        return ExitCode::from(2);
    }
    match run::execute(&instance, &args.out) {
        Ok(all_passed) => {
            if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(1)
        }
    }
}
