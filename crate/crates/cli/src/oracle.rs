//! Oracles selectable from the command line.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use clap::{Args, ValueEnum};
use currl_core::difficulty::{OracleError, RolloutOracle};
use currl_core::io::read_jsonl;
use currl_core::sim::{SimOracle, SimPolicy, SynthTask};
use currl_core::{Error, Result, Sample};
use serde::{Deserialize, Serialize};

use crate::manifest::Tracker;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Bernoulli draws from a simulator policy checkpoint (`--policy`).
    Sim,
    /// Precomputed correctness counts (`--counts`).
    Stub,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Which oracle scores the samples.
    #[arg(long, value_enum)]
    pub oracle: OracleKind,
    /// Simulator policy JSON, for `--oracle sim`.
    #[arg(long, required_if_eq("oracle", "sim"))]
    pub policy: Option<std::path::PathBuf>,
    /// JSONL of {sample_id, attempts, correct}, for `--oracle stub`.
    #[arg(long, required_if_eq("oracle", "stub"))]
    pub counts: Option<std::path::PathBuf>,
}

/// One precomputed outcome: `correct` successes out of `attempts`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubCount {
    pub sample_id: String,
    pub attempts: u32,
    pub correct: u32,
}

/// Answers from a table; a missing `(sample, attempts)` pair is a per-sample
/// failure.
#[derive(Debug, Clone, Default)]
pub struct StubOracle {
    counts: HashMap<(String, u32), u32>,
}

impl StubOracle {
    pub fn new(rows: Vec<StubCount>) -> Result<Self> {
        let mut counts = HashMap::new();
        for r in rows {
            if r.correct > r.attempts {
                return Err(Error::Malformed(format!(
                    "stub count for `{}` has {} correct out of {}",
                    r.sample_id, r.correct, r.attempts
                )));
            }
            if counts.insert((r.sample_id.clone(), r.attempts), r.correct).is_some() {
                return Err(Error::Malformed(format!(
                    "duplicate stub count for `{}` at {} attempts",
                    r.sample_id, r.attempts
                )));
            }
        }
        Ok(StubOracle { counts })
    }
}

impl RolloutOracle for StubOracle {
    fn evaluate(&self, sample: &Sample, n_attempts: u32, _seed: u64) -> std::result::Result<u32, OracleError> {
        self.counts
            .get(&(sample.id.clone(), n_attempts))
            .copied()
            .ok_or_else(|| OracleError(format!("no stub count for {n_attempts} attempts")))
    }
}

pub enum CliOracle {
    Sim(SimOracle),
    Stub(StubOracle),
}

impl RolloutOracle for CliOracle {
    fn evaluate(&self, sample: &Sample, n_attempts: u32, seed: u64) -> std::result::Result<u32, OracleError> {
        match self {
            CliOracle::Sim(o) => o.evaluate(sample, n_attempts, seed),
            CliOracle::Stub(o) => o.evaluate(sample, n_attempts, seed),
        }
    }
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{flag} is required for this oracle")))
}

/// Build the oracle for `samples`. A sim oracle needs the ground truth that
/// simulator datasets carry in their `meta` field.
pub fn load(args: &OracleArgs, samples: &[Sample], tracker: &mut Tracker) -> Result<CliOracle> {
    match args.oracle {
        OracleKind::Stub => {
            let bytes = tracker.read(required(&args.counts, "--counts")?)?;
            Ok(CliOracle::Stub(StubOracle::new(read_jsonl(&bytes[..])?)?))
        }
        OracleKind::Sim => {
            let bytes = tracker.read(required(&args.policy, "--policy")?)?;
            let policy: SimPolicy = serde_json::from_slice(&bytes)?;
            let mut tasks = HashMap::new();
            for s in samples {
                let task = SynthTask::from_sample(s)
                    .ok_or_else(|| Error::Malformed(format!("sample `{}` carries no simulator ground truth", s.id)))?;
                if task.family >= policy.logits.len() || task.correct_arm >= policy.n_arms() {
                    return Err(Error::Malformed(format!("sample `{}` does not fit the policy's shape", s.id)));
                }
                tasks.insert(s.id.clone(), task);
            }
            Ok(CliOracle::Sim(SimOracle::new(policy, Arc::new(tasks))))
        }
    }
}
