//! Command-line front end: gen-data, train, attack, sweep, report.
//!
//! Exit codes: 0 on success, 2 for usage and configuration errors, 1 for
//! failures at run time.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crl_core::data::BlobSpec;
use crl_core::experiment::{self, ExperimentConfig, GenDataArgs};
use crl_core::Error;

#[derive(Parser)]
#[command(name = "crl", version, about = "Center-based relaxed learning against membership inference")]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a noisy Gaussian-blobs dataset as CSV.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        d: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 3.0)]
        sep: f64,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a target model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attack a trained target with the configured suite.
    Attack {
        /// Directory written by `train`.
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and attack every point of the config's grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print summary tables from a train, attack or sweep directory.
    Report { dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> crl_core::Result<()> {
    match command {
        Command::GenData { seed, n, d, classes, sep, noise, out } => {
            let spec = BlobSpec { seed, n, d, classes, separation: sep, label_noise: noise };
            let ds = experiment::cmd_gen_data(&GenDataArgs { spec, out: out.clone() })?;
            println!("wrote {} rows to {}", ds.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = experiment::cmd_train(&cfg, &out)?;
            let last = run.final_record();
            println!(
                "trained {} for {} epochs: train_acc {:.4} test_acc {:.4} -> {}",
                cfg.training.defense.name(),
                last.epoch,
                last.train_acc.unwrap_or(f64::NAN),
                last.test_acc.unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Attack { target, config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = experiment::cmd_attack(&target, &cfg, &out)?;
            for r in &report.reports {
                println!("{:<10} auc {:.4}", r.attack.name(), r.auc);
            }
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = experiment::cmd_sweep(&cfg, &out)?;
            println!("{} grid points -> {}", rows.len(), out.join(experiment::FRONTIER_FILE).display());
        }
        Command::Report { dir } => print!("{}", experiment::cmd_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
