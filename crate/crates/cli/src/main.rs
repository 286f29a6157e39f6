//! `currl`: difficulty estimation, curriculum simulation and log replay.

mod estimate;
mod manifest;
mod oracle;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use currl_core::events::{read_metrics_csv, EventLog};
use currl_core::replay::{replay, replay_with_metrics};
use currl_core::{Error, Result};
use serde_json::json;

use crate::manifest::{manifest_path, Tracker};

#[derive(Debug, Parser)]
#[command(name = "currl", version, about = "Curriculum RL engine: difficulty estimation, scheduling simulation and log replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Coarse-to-fine difficulty estimation, one stage per subcommand.
    #[command(subcommand)]
    Estimate(estimate::EstimateCommand),
    /// Train the synthetic learner under a scheduler mode.
    Simulate(simulate::SimulateArgs),
    /// Write a synthetic dataset and its untrained policy.
    Corpus(simulate::CorpusArgs),
    /// Re-run an event log and check it reproduces exactly.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Event-log JSONL.
    #[arg(long)]
    events: PathBuf,
    /// Metrics CSV the log should reproduce.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Optional replay report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    }
    let mut vals = Vec::with_capacity(3);
    for p in parts {
        vals.push(p.parse::<T>().map_err(|_| format!("`{p}` is not a valid number"))?);
    }
    vals.try_into().map_err(|_| "expected three values".to_string())
}

pub(crate) fn parse_ratios(s: &str) -> std::result::Result<[f64; 3], String> {
    let r: [f64; 3] = parse_list(s)?;
    if r.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
        return Err(format!("ratios must lie in [0, 1], got `{s}`"));
    }
    Ok(r)
}

pub(crate) fn parse_counts(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list(s)
}

/// Seeds given on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SeedList(pub Vec<u64>);

/// `a..b` (inclusive) or `a,b,c`.
pub(crate) fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    let bad = |p: &str| format!("`{p}` is not a seed");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(a))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(b))?;
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad(p))).collect::<std::result::Result<_, _>>().map(SeedList)
}

fn run_replay(a: &ReplayArgs, tracker: &mut Tracker) -> Result<()> {
    let log = EventLog::read_jsonl(&tracker.read(&a.events)?[..])?;
    let report = match &a.metrics {
        Some(p) => replay_with_metrics(&log, &read_metrics_csv(&tracker.read(p)?[..])?)?,
        None => replay(&log)?,
    };
    if let Some(out) = &a.out {
        tracker.write_json(out, &report)?;
        tracker.finish(&manifest_path(out), json!({"command": "replay"}), None)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli, tracker: &mut Tracker) -> Result<()> {
    match &cli.command {
        Command::Estimate(cmd) => estimate::run(cmd, tracker),
        Command::Simulate(a) => simulate::simulate(a, tracker),
        Command::Corpus(a) => simulate::corpus(a, tracker),
        Command::Replay(a) => run_replay(a, tracker),
    }
}

fn report_error(err: &Error) -> ExitCode {
    let mut line = json!({"error": err.kind(), "message": err.to_string()});
    if let Error::ReplayDivergence { step, .. } = err {
        line["step"] = json!(step);
    }
    eprintln!("{line}");
    match err {
        Error::ReplayDivergence { .. } => ExitCode::from(4),
        _ => ExitCode::from(3),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut tracker = Tracker::new(std::env::args().skip(1).collect());
    match dispatch(&cli, &mut tracker) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracker.discard();
            report_error(&e)
        }
    }
}
