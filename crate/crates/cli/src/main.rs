//! `decrl`: run a shipped scenario and write its artifacts.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use clap::{Args, Parser, Subcommand};
use decrl_cli::{run_experiment, RunRequest};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "decrl", version, about = "Policy-sharing RL simulator and attack studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write metrics, policies, and renderings.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file ('decrl-config v1' key = value format).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Scenario name; overrides the config file's choice.
    #[arg(long, value_name = "NAME")]
    scenario: Option<String>,

    /// Master seed; overrides the config file's seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory (default: runs/<scenario>-s<seed>).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Setting override as KEY=VALUE; repeatable, applied last.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let req = RunRequest {
                config_path: args.config.as_deref(),
                scenario: args.scenario.as_deref(),
                seed: args.seed,
                out_dir: args.out_dir.as_deref(),
                overrides: &args.overrides,
            };
            match run_experiment(&req) {
                Ok(report) => {
                    println!("{}", report.summary());
                    println!("artifacts in {}", report.written.dir.display());
                    ExitCode::SUCCESS
                }
                Err(err) => {
                    eprintln!("error: {}", err.message());
                    ExitCode::from(err.exit_code() as u8)
                }
            }
        }
    }
}
