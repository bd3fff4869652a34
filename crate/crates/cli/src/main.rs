//! `cace-lab`: generate datasets, train models, estimate concept effects,
//! run diagnostics and print result tables from one experiment config.
//!
//! Exit codes: 0 success, 1 config error, 2 missing artifact,
//! 3 diagnostic failure.

use std::path::PathBuf;
use std::process::ExitCode;

use cace_core::harness::{set_jobs, Harness, HarnessError, RunOptions, TrainStage, EXIT_DIAGNOSTIC_FAILURE};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cace-lab", version, about = "Causal concept effect experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Rebuild artifacts even when cached.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Classifier,
    Vae,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or reuse) every dataset of the sweep.
    Generate(Common),
    /// Train classifiers and/or VAEs for every cell.
    Train {
        #[arg(value_enum, default_value = "all")]
        stage: Stage,
        #[command(flatten)]
        common: Common,
    },
    /// Run the configured estimators and write results.
    Estimate(Common),
    /// Run the positive- and null-effect diagnostics.
    Diagnose(Common),
    /// Re-render the results table and CSV.
    Report(Common),
    /// generate + train + estimate + diagnose.
    Run(Common),
}

fn open(common: &Common) -> Result<Harness, HarnessError> {
    if let Some(j) = common.jobs {
        set_jobs(j);
    }
    Harness::from_path(
        &common.config,
        RunOptions {
            seed: common.seed,
            out: common.out.clone(),
            force: common.force,
        },
    )
}

fn run(cmd: Command) -> Result<i32, HarnessError> {
    match cmd {
        Command::Generate(c) => {
            let o = open(&c)?.generate()?;
            println!("datasets: {} generated, {} cached", o.built.len(), o.reused.len());
        }
        Command::Train { stage, common } => {
            let stage = match stage {
                Stage::Classifier => TrainStage::Classifier,
                Stage::Vae => TrainStage::Vae,
                Stage::All => TrainStage::All,
            };
            let o = open(&common)?.train(stage)?;
            println!(
                "checkpoints: {} trained, {} cached",
                o.built.len(),
                o.reused.len()
            );
        }
        Command::Estimate(c) => {
            let h = open(&c)?;
            let o = h.estimate()?;
            print!("{}", o.table);
            println!("wrote {}", h.results_csv().display());
        }
        Command::Diagnose(c) => {
            let o = open(&c)?.diagnose()?;
            print!("{}", o.table);
            if !o.all_passed {
                return Ok(EXIT_DIAGNOSTIC_FAILURE);
            }
        }
        Command::Report(c) => print!("{}", open(&c)?.report()?),
        Command::Run(c) => {
            let h = open(&c)?;
            let (_, diag) = h.run_all()?;
            print!("{}", h.report()?);
            if diag.is_some_and(|d| !d.all_passed) {
                return Ok(EXIT_DIAGNOSTIC_FAILURE);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // Usage errors are configuration errors; keep 2 for missing artifacts.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
