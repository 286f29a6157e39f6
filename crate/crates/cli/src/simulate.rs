//! `currl simulate` and `currl corpus`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use currl_core::events::metrics_csv_bytes;
use currl_core::io::to_jsonl;
use currl_core::scheduler::{MergeEvent, StopReason};
use currl_core::sim::{
    generate_corpus, paired_comparison, run_multi_round, Mode, MultiRoundRun, SimConfig, SimRun, SynthTask,
};
use currl_core::{Error, Result, ENGINE_VERSION};
use serde::Serialize;
use serde_json::json;

use crate::manifest::Tracker;
use crate::{parse_seeds, SeedList};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Adacurl,
    NaiveCl,
    Shuffled,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Adacurl => Mode::Adacurl,
            ModeArg::NaiveCl => Mode::NaiveCl,
            ModeArg::Shuffled => Mode::Shuffled,
        }
    }
}

/// Overrides applied on top of the config file.
#[derive(Debug, Clone, Args)]
pub struct SimOverrides {
    /// Simulator config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of buckets.
    #[arg(long)]
    pub k: Option<usize>,
    /// Competence step floor.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Competence window size.
    #[arg(long)]
    pub m: Option<usize>,
    /// Step at which the format reward is dropped.
    #[arg(long)]
    pub tf: Option<u64>,
    /// Step budget per round.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Corpus size.
    #[arg(long)]
    pub n_tasks: Option<usize>,
    /// Prompts per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Rollouts per prompt.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Parallel estimation workers; outputs do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl SimOverrides {
    pub fn resolve(&self, tracker: &mut Tracker) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(p) => serde_json::from_slice(&tracker.read(p)?)?,
            None => SimConfig::default(),
        };
        if let Some(k) = self.k {
            cfg.scheduler.k_buckets = k;
        }
        if let Some(g) = self.gamma {
            cfg.scheduler.gamma = g;
        }
        if let Some(m) = self.m {
            cfg.scheduler.m_window = m;
        }
        if let Some(t) = self.tf {
            cfg.scheduler.t_format_cutoff = t;
        }
        if let Some(s) = self.max_steps {
            cfg.scheduler.max_steps = s;
        }
        if let Some(n) = self.n_tasks {
            cfg.corpus.n_tasks = n;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(g) = self.group_size {
            cfg.group_size = g;
        }
        if let Some(w) = self.workers {
            cfg.pipeline.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sim: SimOverrides,
    /// Scheduler mode.
    #[arg(long, value_enum, default_value = "adacurl")]
    pub mode: ModeArg,
    /// Seed of a single run.
    #[arg(long, default_value_t = 0, conflicts_with = "seeds")]
    pub seed: u64,
    /// Seeds as `a..b` (inclusive) or a comma list.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<SeedList>,
    /// Run every mode on every seed at equal step budgets and write
    /// `comparison.csv`.
    #[arg(long)]
    pub paired: bool,
    /// Curriculum rounds; rounds after the first re-estimate difficulty.
    #[arg(long, default_value_t = 1)]
    pub rounds: u32,
    /// Difficulty floor of rounds after the first.
    #[arg(long, default_value_t = currl_core::self_pacing::DEFAULT_MIN_DIFFICULTY)]
    pub min_difficulty: f64,
    /// Skip the per-run event logs.
    #[arg(long)]
    pub no_events: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(flatten)]
    pub sim: SimOverrides,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset JSONL; the untrained policy goes to `--policy-out`.
    #[arg(long)]
    pub out: PathBuf,
    /// Output path of the untrained policy JSON.
    #[arg(long)]
    pub policy_out: PathBuf,
}

/// One row of `comparison.csv`.
#[derive(Debug, Serialize)]
struct ComparisonRow {
    seed: u64,
    mode: &'static str,
    steps: usize,
    invalid_groups_cum: u64,
    final_corpus_accuracy: f64,
    final_cs: f64,
    frontier_k: usize,
    merges: usize,
}

/// Summary JSON of a run of one or more rounds.
#[derive(Debug, Serialize)]
struct RoundsSummary {
    engine_version: String,
    mode: Mode,
    seed: u64,
    exhausted_at: Option<u32>,
    corpus_accuracy_initial: f64,
    corpus_accuracy_final: f64,
    rounds: Vec<RoundSummary>,
}

#[derive(Debug, Serialize)]
struct RoundSummary {
    round: u32,
    retained: usize,
    estimation: currl_core::difficulty::EstimationSummary,
    steps: usize,
    stop_reason: Option<StopReason>,
    final_cs: f64,
    frontier_k: usize,
    invalid_groups_cum: u64,
    merges: Vec<MergeEvent>,
    reset_steps: Vec<u64>,
    mean_entropy: f64,
    bucket_sizes: Vec<usize>,
}

fn mean_accuracy(run: &MultiRoundRun, policy: &currl_core::sim::SimPolicy) -> f64 {
    run.corpus.iter().map(|t| policy.success_probability(t)).sum::<f64>() / run.corpus.len() as f64
}

fn rounds_summary(run: &MultiRoundRun, mode: Mode, seed: u64) -> RoundsSummary {
    let rounds = run
        .report
        .rounds
        .iter()
        .map(|r| {
            let snap = r.scheduler.snapshot();
            let rows = &r.trace.rows;
            RoundSummary {
                round: r.plan.round_index,
                retained: r.curriculum.len(),
                estimation: r.summary.clone(),
                steps: rows.len(),
                stop_reason: r.trace.stop_reason,
                final_cs: snap.cs,
                frontier_k: snap.frontier_k,
                invalid_groups_cum: snap.invalid_groups_cum,
                merges: r.trace.merges.clone(),
                reset_steps: r.trace.reset_steps.clone(),
                mean_entropy: rows.iter().map(|x| x.mean_entropy).sum::<f64>() / rows.len().max(1) as f64,
                bucket_sizes: r.scheduler.buckets().iter().map(|b| b.sample_ids.len()).collect(),
            }
        })
        .collect();
    RoundsSummary {
        engine_version: ENGINE_VERSION.to_string(),
        mode,
        seed,
        exhausted_at: run.report.exhausted_at,
        corpus_accuracy_initial: mean_accuracy(run, &run.policy_before),
        corpus_accuracy_final: mean_accuracy(run, &run.policy_after),
        rounds,
    }
}

fn stem(out: &Path, mode: Mode, seed: u64) -> PathBuf {
    out.join(format!("{}-seed{seed}", mode.name()))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(ext);
    PathBuf::from(s)
}

fn write_single(tracker: &mut Tracker, out: &Path, run: &SimRun, events: bool) -> Result<()> {
    let base = stem(out, run.mode, run.seed);
    tracker.write(&with_ext(&base, ".metrics.csv"), &metrics_csv_bytes(&run.trace.rows)?)?;
    tracker.write_json(&with_ext(&base, ".summary.json"), &run.summary())?;
    if events {
        tracker.write(&with_ext(&base, ".events.jsonl"), &run.events.to_jsonl_bytes()?)?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs, tracker: &mut Tracker) -> Result<()> {
    let cfg = a.sim.resolve(tracker)?;
    let seeds = a.seeds.clone().map_or_else(|| vec![a.seed], |s| s.0);
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    if a.paired && a.rounds != 1 {
        return Err(Error::Config("--paired compares single-round runs; drop --rounds".into()));
    }
    fs::create_dir_all(&a.out)?;
    let events = !a.no_events;
    if a.paired {
        let rows = paired_comparison(&cfg, &seeds, |_, run| write_single(tracker, &a.out, run, events))?;
        let mut wtr = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            wtr.serialize(ComparisonRow {
                seed: r.seed,
                mode: r.mode.name(),
                steps: r.steps,
                invalid_groups_cum: r.invalid_groups_cum,
                final_corpus_accuracy: r.final_corpus_accuracy,
                final_cs: r.final_cs,
                frontier_k: r.frontier_k,
                merges: r.merges,
            })
            .map_err(currl_core::Error::Csv)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        tracker.write(&a.out.join("comparison.csv"), &bytes)?;
    } else {
        let mode = Mode::from(a.mode);
        for &seed in &seeds {
            let run = run_multi_round(&cfg, mode, a.rounds, a.min_difficulty, seed)?;
            let base = stem(&a.out, mode, seed);
            tracker.write(&with_ext(&base, ".metrics.csv"), &metrics_csv_bytes(&run.rows())?)?;
            tracker.write_json(&with_ext(&base, ".summary.json"), &rounds_summary(&run, mode, seed))?;
            if events {
                tracker.write(&with_ext(&base, ".events.jsonl"), &run.events.to_jsonl_bytes()?)?;
            }
        }
    }
    let config = json!({
        "command": "simulate",
        "sim": cfg,
        "mode": if a.paired { "paired".to_string() } else { Mode::from(a.mode).name().to_string() },
        "seeds": seeds,
        "rounds": a.rounds,
        "min_difficulty": a.min_difficulty,
        "events": events,
    });
    let seed = (seeds.len() == 1).then(|| seeds[0]);
    tracker.finish(&a.out.join("manifest.json"), config, seed)
}

pub fn corpus(a: &CorpusArgs, tracker: &mut Tracker) -> Result<()> {
    let cfg = a.sim.resolve(tracker)?;
    let tasks = generate_corpus(&cfg.corpus, a.seed);
    let samples: Vec<_> = tasks.iter().map(SynthTask::to_sample).collect();
    tracker.write(&a.out, &to_jsonl(&samples)?)?;
    tracker.write_json(&a.policy_out, &cfg.fresh_policy())?;
    let config = json!({"command": "corpus", "corpus": cfg.corpus, "policy": cfg.fresh_policy()});
    tracker.finish(&crate::manifest::manifest_path(&a.out), config, Some(a.seed))
}
