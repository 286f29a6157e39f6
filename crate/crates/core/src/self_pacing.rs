//! Multi-round training that re-estimates difficulty with the trained
//! policy.
//!
//! After a round finishes, the remaining corpus (everything minus what was
//! already trained) is estimated again, problems the policy now solves
//! reliably are dropped, and a fresh curriculum is built from the rest.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::difficulty::{coarse_to_fine, EstimationSummary, PipelineConfig, RolloutOracle, DEFAULT_HI, DEFAULT_LO};
use crate::error::{Error, Result};
use crate::scheduler::{Scheduler, SchedulerMode};
use crate::seed::derive_sample_seed;
use crate::types::{DifficultyRecord, Sample, SchedulerConfig};

pub const DEFAULT_MIN_DIFFICULTY: f64 = 0.2;

/// Parameters of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// 1-based round number.
    pub round_index: u32,
    /// Lower difficulty bound for rounds after the first.
    pub min_difficulty: f64,
    /// Upper difficulty bound for rounds after the first.
    pub max_difficulty: f64,
    /// Ids trained in earlier rounds.
    pub exclude_ids: BTreeSet<String>,
    pub k_buckets: usize,
}

impl RoundPlan {
    pub fn first(k_buckets: usize) -> Self {
        RoundPlan {
            round_index: 1,
            min_difficulty: DEFAULT_MIN_DIFFICULTY,
            max_difficulty: DEFAULT_HI,
            exclude_ids: BTreeSet::new(),
            k_buckets,
        }
    }

    /// Plan for the following round, excluding `trained` on top of what this
    /// plan already excludes.
    pub fn next(&self, trained: &BTreeSet<String>) -> Self {
        let mut exclude_ids = self.exclude_ids.clone();
        exclude_ids.extend(trained.iter().cloned());
        RoundPlan {
            round_index: self.round_index + 1,
            exclude_ids,
            ..self.clone()
        }
    }

    /// Difficulty band of this round. The first round keeps the standard
    /// band; later ones raise the floor.
    pub fn band(&self) -> (f64, f64) {
        if self.round_index <= 1 {
            (DEFAULT_LO, DEFAULT_HI)
        } else {
            (self.min_difficulty, self.max_difficulty)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.round_index == 0 {
            return Err(Error::Config("round_index starts at 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_difficulty) {
            return Err(Error::Config(format!("min_difficulty {} outside [0, 1)", self.min_difficulty)));
        }
        if !(self.max_difficulty > self.min_difficulty && self.max_difficulty <= 1.0) {
            return Err(Error::Config(format!(
                "max_difficulty {} must lie in (min_difficulty, 1]",
                self.max_difficulty
            )));
        }
        if self.k_buckets == 0 {
            return Err(Error::Config("k_buckets must be >= 1".into()));
        }
        Ok(())
    }
}

/// A planned round: its curriculum and a fresh scheduler over it.
#[derive(Debug, Clone)]
pub struct PlannedRound {
    pub plan: RoundPlan,
    pub curriculum: Vec<DifficultyRecord>,
    pub summary: EstimationSummary,
    pub scheduler: Scheduler,
}

/// Build round `plan.round_index` from the whole corpus minus the excluded
/// ids. `oracle` must be bound to the current policy.
pub fn plan_round<O: RolloutOracle + ?Sized>(
    corpus: &[Sample],
    oracle: &O,
    plan: &RoundPlan,
    pipeline: &PipelineConfig,
    scheduler_config: &SchedulerConfig,
    mode: SchedulerMode,
    seed: u64,
) -> Result<PlannedRound> {
    plan.validate()?;
    let round = plan.round_index;
    let remaining: Vec<Sample> = corpus
        .iter()
        .filter(|s| !plan.exclude_ids.contains(&s.id))
        .cloned()
        .collect();
    if remaining.is_empty() {
        return Err(Error::CorpusExhausted { round });
    }
    let (lo, hi) = plan.band();
    let cfg = PipelineConfig {
        lo,
        hi,
        ..pipeline.clone()
    };
    let est = match coarse_to_fine(&remaining, oracle, &cfg, derive_sample_seed(seed, "round/estimate", round as u64)) {
        Err(Error::EmptyCurriculum { .. }) => return Err(Error::CorpusExhausted { round }),
        other => other?,
    };
    let config = SchedulerConfig {
        k_buckets: plan.k_buckets,
        seed: derive_sample_seed(seed, "round/scheduler", round as u64),
        ..scheduler_config.clone()
    };
    let scheduler = Scheduler::from_records(config, mode, &est.curriculum)?;
    Ok(PlannedRound {
        plan: plan.clone(),
        curriculum: est.curriculum,
        summary: est.summary,
        scheduler,
    })
}

/// Plan the round after `prev`, which must have finished. Everything `prev`
/// trained joins the exclusion set.
pub fn plan_next_round<O: RolloutOracle + ?Sized>(
    prev: &Scheduler,
    corpus: &[Sample],
    oracle: &O,
    plan: &RoundPlan,
    pipeline: &PipelineConfig,
    seed: u64,
) -> Result<PlannedRound> {
    if prev.should_stop().is_none() {
        return Err(Error::contract("previous round has not finished"));
    }
    let next = RoundPlan {
        exclude_ids: plan.exclude_ids.union(&prev.state().trained_ids).cloned().collect(),
        ..plan.clone()
    };
    plan_round(corpus, oracle, &next, pipeline, prev.config(), prev.mode(), seed)
}

/// Something that can be trained for one round and judged by an oracle.
pub trait RoundLearner {
    type Oracle: RolloutOracle;
    type Trace;

    /// Oracle bound to the learner's current policy.
    fn oracle(&self) -> Self::Oracle;

    /// Train until `scheduler` says stop.
    fn train_round(&mut self, round: u32, scheduler: &mut Scheduler) -> Result<Self::Trace>;
}

/// One finished round.
#[derive(Debug, Clone)]
pub struct RoundOutcome<T> {
    pub plan: RoundPlan,
    pub curriculum: Vec<DifficultyRecord>,
    pub summary: EstimationSummary,
    /// Scheduler at the end of the round.
    pub scheduler: Scheduler,
    pub trace: T,
}

impl<T> RoundOutcome<T> {
    pub fn trained_ids(&self) -> &BTreeSet<String> {
        &self.scheduler.state().trained_ids
    }
}

#[derive(Debug, Clone)]
pub struct RoundsReport<T> {
    pub rounds: Vec<RoundOutcome<T>>,
    /// Round that found no usable data, if iteration ended that way.
    pub exhausted_at: Option<u32>,
}

/// Run up to `n_rounds` rounds. A round that finds no data ends the
/// iteration normally.
#[allow(clippy::too_many_arguments)]
pub fn run_rounds<L: RoundLearner>(
    learner: &mut L,
    corpus: &[Sample],
    pipeline: &PipelineConfig,
    scheduler_config: &SchedulerConfig,
    mode: SchedulerMode,
    n_rounds: u32,
    min_difficulty: f64,
    seed: u64,
) -> Result<RoundsReport<L::Trace>> {
    if n_rounds == 0 {
        return Err(Error::Config("n_rounds must be >= 1".into()));
    }
    let mut plan = RoundPlan {
        min_difficulty,
        ..RoundPlan::first(scheduler_config.k_buckets)
    };
    let mut report = RoundsReport {
        rounds: Vec::new(),
        exhausted_at: None,
    };
    for _ in 0..n_rounds {
        let oracle = learner.oracle();
        let planned = match plan_round(corpus, &oracle, &plan, pipeline, scheduler_config, mode, seed) {
            Ok(p) => p,
            Err(Error::CorpusExhausted { round }) => {
                report.exhausted_at = Some(round);
                break;
            }
            Err(e) => return Err(e),
        };
        let mut scheduler = planned.scheduler;
        let trace = learner.train_round(plan.round_index, &mut scheduler)?;
        let next = plan.next(&scheduler.state().trained_ids);
        report.rounds.push(RoundOutcome {
            plan: planned.plan,
            curriculum: planned.curriculum,
            summary: planned.summary,
            scheduler,
            trace,
        });
        plan = next;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difficulty::{OracleError, SamplingPlan};

    /// Success count encoded in the sample id: `s<correct per 100>`.
    struct Encoded;
    impl RolloutOracle for Encoded {
        fn evaluate(&self, s: &Sample, n: u32, _: u64) -> std::result::Result<u32, OracleError> {
            let per100: u32 = s.id.split('-').nth(1).unwrap().parse().unwrap();
            Ok(per100 * n / 100)
        }
    }

    fn sample(id: &str) -> Sample {
        Sample {
            id: id.into(),
            dataset: "d".into(),
            prompt: "p".into(),
            answer: "a".into(),
            meta: Default::default(),
        }
    }

    fn finished(ids: &[&str]) -> Scheduler {
        let recs: Vec<_> = ids.iter().map(|i| DifficultyRecord::fine(*i, 50, 100)).collect();
        let cfg = SchedulerConfig {
            k_buckets: 1,
            max_steps: 1,
            ..SchedulerConfig::default()
        };
        let mut s = Scheduler::from_records(cfg, SchedulerMode::Adaptive, &recs).unwrap();
        s.next_batch(ids.len()).unwrap();
        assert!(s.should_stop().is_some());
        s
    }

    fn plan2() -> RoundPlan {
        RoundPlan {
            round_index: 2,
            k_buckets: 1,
            ..RoundPlan::first(1)
        }
    }

    #[test]
    fn floor_drops_solved_samples() {
        // difficulties 0.9, 0.81, 0.8, 0.3
        let corpus: Vec<_> = ["a-10", "b-19", "c-20", "d-70"].iter().map(|i| sample(i)).collect();
        let prev = finished(&["x-50"]);
        let r = plan_next_round(&prev, &corpus, &Encoded, &plan2(), &PipelineConfig::default(), 1).unwrap();
        let kept: Vec<_> = r.curriculum.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(kept, vec!["d-70", "c-20", "b-19", "a-10"]);

        // the same values read as difficulties {0.1, 0.19, 0.2, 0.7}
        let corpus: Vec<_> = ["a-90", "b-81", "c-80", "d-30"].iter().map(|i| sample(i)).collect();
        let r = plan_next_round(&prev, &corpus, &Encoded, &plan2(), &PipelineConfig::default(), 1).unwrap();
        let kept: Vec<_> = r.curriculum.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(kept, vec!["c-80", "d-30"]);
        assert!(r.curriculum.iter().all(|r| r.difficulty.unwrap() >= 0.2));
    }

    #[test]
    fn trained_ids_are_excluded() {
        let corpus: Vec<_> = ["a-50", "b-50", "c-50"].iter().map(|i| sample(i)).collect();
        let prev = finished(&["a-50"]);
        let r = plan_next_round(&prev, &corpus, &Encoded, &plan2(), &PipelineConfig::default(), 3).unwrap();
        let ids: BTreeSet<_> = r.curriculum.iter().map(|r| r.sample_id.clone()).collect();
        assert!(!ids.contains("a-50"));
        assert_eq!(ids.len(), 2);
        assert_eq!(r.scheduler.state().frontier_k, 1);
        assert_eq!(r.scheduler.state().cs, 0.0);
        assert!(r.scheduler.state().trained_ids.is_empty());
    }

    #[test]
    fn empty_survivors_exhaust() {
        let corpus = vec![sample("a-50"), sample("b-99")];
        let prev = finished(&["a-50"]);
        let err = plan_next_round(&prev, &corpus, &Encoded, &plan2(), &PipelineConfig::default(), 3).unwrap_err();
        assert!(matches!(err, Error::CorpusExhausted { round: 2 }));
    }

    #[test]
    fn unfinished_round_is_rejected() {
        let recs = vec![DifficultyRecord::fine("a-50", 50, 100)];
        let cfg = SchedulerConfig {
            k_buckets: 1,
            ..SchedulerConfig::default()
        };
        let s = Scheduler::from_records(cfg, SchedulerMode::Adaptive, &recs).unwrap();
        let err = plan_next_round(&s, &[sample("a-50")], &Encoded, &plan2(), &PipelineConfig::default(), 0).unwrap_err();
        assert_eq!(err.kind(), "contract-violation");
    }

    #[test]
    fn first_round_uses_standard_band() {
        assert_eq!(RoundPlan::first(4).band(), (0.05, 0.95));
        assert_eq!(plan2().band(), (0.2, 0.95));
        let p = SamplingPlan::default();
        assert!(matches!(p.targets, crate::difficulty::SamplingTargets::Ratios(_)));
    }
}
