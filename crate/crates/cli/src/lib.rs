//! Experiment runner: strict configuration, six shipped scenarios, and
//! byte-reproducible artifacts.
//!
//! The flow is [`config::resolve`] → [`scenario::run_scenario`] →
//! [`artifacts::write_run`]; [`run_experiment`] chains the three for the
//! `decrl run` command, and the pieces are public so tests can drive any
//! stage directly.

pub mod artifacts;
pub mod config;
pub mod render;
pub mod scenario;

use crate::artifacts::{summary_line, write_run, WrittenRun};
use crate::config::{parse_config_text, parse_override, resolve};
use crate::scenario::{run_scenario, ScenarioOutcome};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Arguments of one `decrl run` invocation.
#[derive(Debug, Default)]
pub struct RunRequest<'a> {
    pub config_path: Option<&'a Path>,
    pub scenario: Option<&'a str>,
    pub seed: Option<u64>,
    pub out_dir: Option<&'a Path>,
    /// Raw `KEY=VALUE` strings, applied last in the given order.
    pub overrides: &'a [String],
}

/// Failure of a run, split by whose fault it is: bad invocation or config
/// (exit 2) versus a failure while executing a valid request (exit 1).
#[derive(Debug)]
pub enum RunError {
    Usage(String),
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            RunError::Usage(msg) | RunError::Runtime(msg) => msg,
        }
    }
}

/// A finished run: the in-memory outcome plus the files it left behind.
#[derive(Debug)]
pub struct RunReport {
    pub outcome: ScenarioOutcome,
    pub written: WrittenRun,
}

impl RunReport {
    /// One-line terminal summary of the outcome.
    pub fn summary(&self) -> String {
        summary_line(&self.outcome)
    }
}

/// Parse, resolve, execute, and write one experiment.
pub fn run_experiment(req: &RunRequest) -> Result<RunReport, RunError> {
    let usage = |msg: String| RunError::Usage(msg);
    let file_pairs = match req.config_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            parse_config_text(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let overrides: Vec<(String, String)> = req
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<_, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let resolved = resolve(&file_pairs, req.scenario, req.seed, &overrides)
        .map_err(|e| usage(e.to_string()))?;

    let started = Instant::now();
    let outcome = run_scenario(&resolved).map_err(|e| RunError::Runtime(e.to_string()))?;
    let wall_seconds = started.elapsed().as_secs_f64();

    let dir = match req.out_dir {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("runs")
            .join(format!("{}-s{}", resolved.scenario.name(), resolved.settings.seed)),
    };
    let written = write_run(&outcome, &dir, wall_seconds)
        .map_err(|e| RunError::Runtime(format!("writing {}: {e}", dir.display())))?;
    Ok(RunReport { outcome, written })
}
