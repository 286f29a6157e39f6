//! `currl estimate ...`: the difficulty pipeline one stage at a time.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use currl_core::difficulty::{
    attach_coarse, filter_and_sort, stratified_sample, Estimator, SamplingPlan, SamplingTargets, DEFAULT_COARSE_ATTEMPTS,
    DEFAULT_FINE_ATTEMPTS, DEFAULT_HI, DEFAULT_LO,
};
use currl_core::io::{check_samples, read_jsonl, to_jsonl};
use currl_core::scheduler::{partition_buckets, Bucket};
use currl_core::{DifficultyRecord, Result, Sample};
use serde::Serialize;
use serde_json::json;

use crate::manifest::{manifest_path, sibling, Tracker};
use crate::oracle::{self, OracleArgs};
use crate::{parse_counts, parse_ratios};

#[derive(Debug, Subcommand)]
pub enum EstimateCommand {
    /// Score every sample with a few attempts and assign coarse bins.
    Coarse(CoarseArgs),
    /// Draw a stratified sample from the coarse bins.
    Sample(SampleArgs),
    /// Score samples precisely with many attempts.
    Fine(FineArgs),
    /// Filter by difficulty, sort and split into buckets.
    Partition(PartitionArgs),
}

#[derive(Debug, Args)]
pub struct CoarseArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Attempts per sample.
    #[arg(long, default_value_t = DEFAULT_COARSE_ATTEMPTS)]
    pub attempts: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel oracle workers; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output difficulty-record JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Dataset JSONL the coarse records refer to.
    #[arg(long)]
    pub data: PathBuf,
    /// Coarse difficulty-record JSONL.
    #[arg(long)]
    pub coarse: PathBuf,
    /// Per-bin fractions for G1,G2,G3.
    #[arg(long, value_parser = parse_ratios, conflicts_with = "targets")]
    pub ratios: Option<[f64; 3]>,
    /// Per-bin absolute counts for G1,G2,G3.
    #[arg(long, value_parser = parse_counts)]
    pub targets: Option<[usize; 3]>,
    /// Draw uniformly within a bin instead of balancing source datasets.
    #[arg(long)]
    pub no_dataset_balance: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset JSONL of drawn samples; a `.summary.json` goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FineArgs {
    /// Dataset JSONL to score.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub oracle: OracleArgs,
    /// Attempts per sample.
    #[arg(long, default_value_t = DEFAULT_FINE_ATTEMPTS)]
    pub n: u32,
    /// Coarse records whose counts are copied onto the fine records.
    #[arg(long)]
    pub coarse: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parallel oracle workers; outputs do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output difficulty-record JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Fine difficulty-record JSONL.
    #[arg(long)]
    pub records: PathBuf,
    /// Lowest difficulty kept.
    #[arg(long, default_value_t = DEFAULT_LO)]
    pub lo: f64,
    /// Highest difficulty kept.
    #[arg(long, default_value_t = DEFAULT_HI)]
    pub hi: f64,
    /// Number of buckets.
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Output partition JSON.
    #[arg(long)]
    pub out: PathBuf,
}

/// Output of `estimate partition`.
#[derive(Debug, Serialize)]
pub struct PartitionSummary {
    pub lo: f64,
    pub hi: f64,
    pub k: usize,
    pub filtered_below: usize,
    pub filtered_above: usize,
    pub failed: usize,
    pub retained: usize,
    pub bucket_sizes: Vec<usize>,
    pub buckets: Vec<Bucket>,
    pub curriculum: Vec<DifficultyRecord>,
}

fn samples(tracker: &mut Tracker, path: &Path) -> Result<Vec<Sample>> {
    let bytes = tracker.read(path)?;
    let samples: Vec<Sample> = read_jsonl(&bytes[..])?;
    check_samples(&samples)?;
    Ok(samples)
}

fn records(tracker: &mut Tracker, path: &Path) -> Result<Vec<DifficultyRecord>> {
    let bytes = tracker.read(path)?;
    read_jsonl(&bytes[..])
}

pub fn run(cmd: &EstimateCommand, tracker: &mut Tracker) -> Result<()> {
    match cmd {
        EstimateCommand::Coarse(a) => {
            let data = samples(tracker, &a.data)?;
            let oracle = oracle::load(&a.oracle, &data, tracker)?;
            let est = Estimator::new(&oracle)
                .workers(a.workers)
                .coarse_attempts(a.attempts)
                .coarse(&data, a.seed)?;
            tracker.write(&a.out, &to_jsonl(&est.records)?)?;
            let config = json!({"command": "estimate coarse", "attempts": a.attempts, "oracle": format!("{:?}", a.oracle.oracle).to_lowercase()});
            tracker.finish(&manifest_path(&a.out), config, Some(a.seed))
        }
        EstimateCommand::Sample(a) => {
            let data = samples(tracker, &a.data)?;
            let coarse = records(tracker, &a.coarse)?;
            let targets = match (a.targets, a.ratios) {
                (Some(c), _) => SamplingTargets::Counts(c),
                (None, Some(r)) => SamplingTargets::Ratios(r),
                (None, None) => SamplingPlan::default().targets,
            };
            let plan = SamplingPlan {
                targets,
                per_dataset_balance: !a.no_dataset_balance,
            };
            let by_id: HashMap<String, Sample> = data.iter().map(|s| (s.id.clone(), s.clone())).collect();
            let drawn = stratified_sample(&coarse, &by_id, &plan, a.seed)?;
            tracker.write(&a.out, &to_jsonl(&drawn.samples)?)?;
            let summary = json!({
                "bin_sizes": drawn.bin_sizes,
                "targets": drawn.targets,
                "drawn": drawn.samples.len(),
                "contributions": {
                    "G1": drawn.contributions[0],
                    "G2": drawn.contributions[1],
                    "G3": drawn.contributions[2],
                },
            });
            tracker.write_json(&sibling(&a.out, "summary.json"), &summary)?;
            let config = json!({"command": "estimate sample", "plan": plan});
            tracker.finish(&manifest_path(&a.out), config, Some(a.seed))
        }
        EstimateCommand::Fine(a) => {
            let data = samples(tracker, &a.data)?;
            let coarse = match &a.coarse {
                Some(p) => Some(records(tracker, p)?),
                None => None,
            };
            let oracle = oracle::load(&a.oracle, &data, tracker)?;
            let mut est = Estimator::new(&oracle).workers(a.workers).fine(&data, a.n, a.seed)?;
            if let Some(c) = &coarse {
                attach_coarse(&mut est.records, c);
            }
            tracker.write(&a.out, &to_jsonl(&est.records)?)?;
            let config = json!({"command": "estimate fine", "n": a.n, "oracle": format!("{:?}", a.oracle.oracle).to_lowercase()});
            tracker.finish(&manifest_path(&a.out), config, Some(a.seed))
        }
        EstimateCommand::Partition(a) => {
            let recs = records(tracker, &a.records)?;
            let filtered = filter_and_sort(&recs, a.lo, a.hi)?;
            let buckets = partition_buckets(&filtered.records, a.k)?;
            let summary = PartitionSummary {
                lo: a.lo,
                hi: a.hi,
                k: a.k,
                filtered_below: filtered.below,
                filtered_above: filtered.above,
                failed: filtered.failed,
                retained: filtered.records.len(),
                bucket_sizes: buckets.iter().map(|b| b.sample_ids.len()).collect(),
                buckets,
                curriculum: filtered.records,
            };
            tracker.write_json(&a.out, &summary)?;
            let config = json!({"command": "estimate partition", "lo": a.lo, "hi": a.hi, "k": a.k});
            tracker.finish(&manifest_path(&a.out), config, None)
        }
    }
}
