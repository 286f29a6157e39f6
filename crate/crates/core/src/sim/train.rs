use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::difficulty::{coarse_estimate, EstimationSummary};
use crate::error::{Error, Result};
use crate::events::{Event, EventLog, GrantPayload, InitPayload, MetricsRow, ReportPayload, StopPayload, EVENT_FORMAT};
use crate::grpo::{entropy, softmax_policy_loss_and_grad, PolicyLossParams, PolicyLossOutput};
use crate::scheduler::{MergeEvent, Scheduler, StopReason};
use crate::self_pacing::{plan_round, run_rounds, RoundLearner, RoundPlan, RoundsReport};
use crate::seed::derive_sample_seed;
use crate::sim::policy::{rollout, SimOracle, SimPolicy};
use crate::sim::task::{generate_corpus, SynthTask};
use crate::sim::{Mode, SimConfig};
use crate::types::{DifficultyRecord, RolloutGroup};
use crate::ENGINE_VERSION;

/// Per-step metrics of one training round plus its scheduler events.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
    pub merges: Vec<MergeEvent>,
    /// Steps whose batch started from a freshly reset reference policy.
    pub reset_steps: Vec<u64>,
    pub stop_reason: Option<StopReason>,
}

impl MetricsTrace {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn invalid_groups_cum(&self) -> u64 {
        self.final_row().map_or(0, |r| r.invalid_groups_cum)
    }

    /// Mean of `mean_kl` over rows `[from, to)`, clipped to the trace.
    pub fn mean_kl_window(&self, from: usize, to: usize) -> Option<f64> {
        let to = to.min(self.rows.len());
        if from >= to {
            return None;
        }
        let rows = &self.rows[from..to];
        Some(rows.iter().map(|r| r.mean_kl).sum::<f64>() / rows.len() as f64)
    }
}

/// Inputs shared by every step of a round.
pub struct RoundContext<'a> {
    pub config: &'a SimConfig,
    pub tasks: &'a HashMap<String, SynthTask>,
    /// Tasks over which `corpus_accuracy` is measured.
    pub eval: &'a [SynthTask],
    pub round: u32,
    pub seed: u64,
}

fn expected_accuracy(policy: &SimPolicy, tasks: &[SynthTask]) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    tasks.iter().map(|t| policy.success_probability(t)).sum::<f64>() / tasks.len() as f64
}

/// Run one curriculum round to completion: grant, roll out, score, update,
/// report, until the scheduler says stop.
pub fn train_round(
    ctx: &RoundContext<'_>,
    policy: &mut SimPolicy,
    scheduler: &mut Scheduler,
    mut log: Option<&mut EventLog>,
) -> Result<MetricsTrace> {
    let cfg = ctx.config;
    let sched_cfg = scheduler.config().clone();
    let params = PolicyLossParams {
        clip_range: cfg.clip.then_some(sched_cfg.clip_range),
        beta_kl: sched_cfg.beta_kl,
    };
    if let Some(log) = log.as_deref_mut() {
        log.push(
            scheduler.state().step,
            Event::Init(InitPayload {
                format: EVENT_FORMAT,
                engine_version: ENGINE_VERSION.to_string(),
                round: ctx.round,
                config: sched_cfg.clone(),
                mode: scheduler.mode(),
                buckets: scheduler.buckets().to_vec(),
                batch_size: cfg.batch_size,
                group_size: cfg.group_size,
                clip_range: params.clip_range,
            }),
        );
    }

    let mut trace = MetricsTrace::default();
    let mut reference = policy.logits.clone();
    loop {
        if let Some(reason) = scheduler.should_stop() {
            trace.stop_reason = Some(reason);
            if let Some(log) = log.as_deref_mut() {
                log.push(scheduler.state().step, Event::Stop(StopPayload { reason }));
            }
            break;
        }
        let grant = scheduler.next_batch(cfg.batch_size.min(scheduler.eligible_pool_len()))?;
        let step = grant.step;
        if let Some(log) = log.as_deref_mut() {
            for m in &grant.merges {
                log.push(step, Event::Merge(m.clone()));
            }
            log.push(
                step,
                Event::Grant(GrantPayload {
                    sample_ids: grant.sample_ids.clone(),
                    reset_reference: grant.reset_reference,
                }),
            );
        }
        trace.merges.extend(grant.merges.iter().cloned());
        if grant.reset_reference {
            reference = policy.logits.clone();
            trace.reset_steps.push(step);
        }

        let rollout_logits = policy.logits.clone();
        let format_prob = cfg.format.probability(step);
        let mut batch = Vec::with_capacity(grant.sample_ids.len());
        for id in &grant.sample_ids {
            let task = ctx
                .tasks
                .get(id)
                .ok_or_else(|| Error::contract(format!("granted id `{id}` is not a known task")))?;
            let seed = derive_sample_seed(ctx.seed, &format!("rollout/{}/{id}", ctx.round), step);
            let r = rollout(policy, task, cfg.group_size, format_prob, seed);
            let group = RolloutGroup::with_accuracy(
                id.clone(),
                &r.accuracy,
                &r.format,
                step,
                sched_cfg.t_format_cutoff,
                sched_cfg.epsilon_adv,
            )?;
            batch.push((task, r, group));
        }

        let n = batch.len() as f64;
        let pre_kl: Vec<f64>;
        let mut last: Vec<PolicyLossOutput> = Vec::new();
        let mut first_kl = None;
        for _ in 0..cfg.inner_epochs {
            let mut grads = vec![vec![0.0; policy.n_arms()]; policy.logits.len()];
            let mut outs = Vec::with_capacity(batch.len());
            for (task, r, group) in &batch {
                let out = softmax_policy_loss_and_grad(
                    &policy.task_logits(task),
                    &policy.logits_with(&rollout_logits, task),
                    &policy.logits_with(&reference, task),
                    &r.chosen,
                    &group.advantages,
                    group.kl_gated_off,
                    params,
                )?;
                for (g, d) in grads[task.family].iter_mut().zip(&out.grad) {
                    *g += d;
                }
                outs.push(out);
            }
            if first_kl.is_none() {
                first_kl = Some(outs.iter().map(|o| o.kl).collect::<Vec<_>>());
            }
            let lr = policy.learning_rate;
            for (theta, g) in policy.logits.iter_mut().zip(&grads) {
                for (t, d) in theta.iter_mut().zip(g) {
                    *t -= lr * d / n;
                }
            }
            last = outs;
        }
        pre_kl = first_kl.unwrap_or_default();

        let mut invalid = 0;
        let mut sum_acc = 0.0;
        let mut sum_loss = 0.0;
        let mut sum_entropy = 0.0;
        for ((task, _, group), out) in batch.iter().zip(&last) {
            if group.kl_gated_off {
                invalid += 1;
            }
            sum_acc += group.accuracy_mean;
            sum_loss += out.loss;
            sum_entropy += entropy(&policy.logits_with(&rollout_logits, task));
        }
        for ((task, r, group), out) in batch.iter().zip(&last) {
            let merge = scheduler.report_group(group, step)?;
            if let Some(log) = log.as_deref_mut() {
                let snap = scheduler.snapshot();
                log.push(
                    step,
                    Event::Report(ReportPayload {
                        sample_id: group.sample_id.clone(),
                        bucket: scheduler.bucket_of(&task.sample_id).unwrap_or(0),
                        accuracy: r.accuracy.clone(),
                        rewards: group.rewards.clone(),
                        advantages: group.advantages.clone(),
                        kl_gated_off: group.kl_gated_off,
                        ratios: out.ratio.clone(),
                        kl: out.kl,
                        loss: out.loss,
                        cs: snap.cs,
                        frontier_k: snap.frontier_k,
                        buffer_fill: snap.buffer_fill,
                        invalid_groups_cum: snap.invalid_groups_cum,
                    }),
                );
                if let Some(m) = &merge {
                    log.push(step, Event::Merge(m.clone()));
                }
            }
            if let Some(m) = merge {
                trace.merges.push(m);
            }
        }

        let snap = scheduler.snapshot();
        trace.rows.push(MetricsRow {
            step,
            mean_accuracy_reward: sum_acc / n,
            cs: snap.cs,
            frontier_k: snap.frontier_k,
            invalid_groups_cum: snap.invalid_groups_cum,
            buffer_fill: snap.buffer_fill,
            round: ctx.round,
            reset_reference: u8::from(grant.reset_reference),
            invalid_groups: invalid,
            mean_loss: sum_loss / n,
            mean_kl: pre_kl.iter().sum::<f64>() / n,
            mean_entropy: sum_entropy / n,
            corpus_accuracy: expected_accuracy(policy, ctx.eval),
        });
    }
    Ok(trace)
}

/// Expected accuracy of one bucket before and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAccuracy {
    pub bucket: usize,
    pub size: usize,
    pub accuracy_initial: f64,
    pub accuracy_final: f64,
}

/// Run-summary JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub engine_version: String,
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub stop_reason: Option<StopReason>,
    pub final_cs: f64,
    pub frontier_k: usize,
    pub invalid_groups_cum: u64,
    pub merges: Vec<MergeEvent>,
    pub reset_steps: Vec<u64>,
    pub corpus_accuracy_initial: f64,
    pub corpus_accuracy_final: f64,
    pub per_bucket_accuracy: Vec<BucketAccuracy>,
    pub estimation: EstimationSummary,
}

/// Everything produced by one simulator run.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub mode: Mode,
    pub seed: u64,
    pub corpus: Vec<SynthTask>,
    pub curriculum: Vec<DifficultyRecord>,
    pub estimation: EstimationSummary,
    pub scheduler: Scheduler,
    pub policy_before: SimPolicy,
    pub policy_after: SimPolicy,
    pub trace: MetricsTrace,
    pub events: EventLog,
}

impl SimRun {
    pub fn summary(&self) -> RunSummary {
        let index: HashMap<&str, &SynthTask> = self.corpus.iter().map(|t| (t.sample_id.as_str(), t)).collect();
        let per_bucket_accuracy = self
            .scheduler
            .buckets()
            .iter()
            .map(|b| {
                let tasks: Vec<SynthTask> = b.sample_ids.iter().map(|id| index[id.as_str()].clone()).collect();
                BucketAccuracy {
                    bucket: b.index,
                    size: tasks.len(),
                    accuracy_initial: expected_accuracy(&self.policy_before, &tasks),
                    accuracy_final: expected_accuracy(&self.policy_after, &tasks),
                }
            })
            .collect();
        let snap = self.scheduler.snapshot();
        RunSummary {
            engine_version: ENGINE_VERSION.to_string(),
            mode: self.mode,
            seed: self.seed,
            steps: self.trace.rows.len(),
            stop_reason: self.trace.stop_reason,
            final_cs: snap.cs,
            frontier_k: snap.frontier_k,
            invalid_groups_cum: snap.invalid_groups_cum,
            merges: self.trace.merges.clone(),
            reset_steps: self.trace.reset_steps.clone(),
            corpus_accuracy_initial: expected_accuracy(&self.policy_before, &self.corpus),
            corpus_accuracy_final: expected_accuracy(&self.policy_after, &self.corpus),
            per_bucket_accuracy,
            estimation: self.estimation.clone(),
        }
    }
}

pub(crate) fn task_index(corpus: &[SynthTask]) -> Arc<HashMap<String, SynthTask>> {
    Arc::new(corpus.iter().map(|t| (t.sample_id.clone(), t.clone())).collect())
}

/// Generate the corpus for `seed` and train on it.
pub fn run(cfg: &SimConfig, mode: Mode, seed: u64) -> Result<SimRun> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus, seed);
    train(cfg, &corpus, mode, seed)
}

/// Estimate difficulty with an untrained policy, build the curriculum and
/// train a fresh policy on it under `mode`.
pub fn train(cfg: &SimConfig, corpus: &[SynthTask], mode: Mode, seed: u64) -> Result<SimRun> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::contract("simulator corpus is empty"));
    }
    let tasks = task_index(corpus);
    let policy_before = cfg.fresh_policy();
    let samples: Vec<_> = corpus.iter().map(SynthTask::to_sample).collect();
    let oracle = SimOracle::new(policy_before.clone(), tasks.clone());
    let sched_cfg = crate::types::SchedulerConfig {
        seed,
        ..cfg.scheduler.clone()
    };
    let planned = plan_round(
        &samples,
        &oracle,
        &RoundPlan::first(sched_cfg.k_buckets),
        &cfg.pipeline,
        &sched_cfg,
        cfg.scheduler_mode(mode),
        seed,
    )?;
    let mut scheduler = planned.scheduler;
    let mut policy = policy_before.clone();
    let mut events = EventLog::default();
    let ctx = RoundContext {
        config: cfg,
        tasks: &tasks,
        eval: corpus,
        round: 1,
        seed,
    };
    let trace = train_round(&ctx, &mut policy, &mut scheduler, Some(&mut events))?;
    Ok(SimRun {
        mode,
        seed,
        corpus: corpus.to_vec(),
        curriculum: planned.curriculum,
        estimation: planned.summary,
        scheduler,
        policy_before,
        policy_after: policy,
        trace,
        events,
    })
}

/// Coarse-bin sizes of a corpus under two policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub before: [usize; 3],
    pub after: [usize; 3],
}

/// Re-run the coarse pass under `before` and `after` with the same seed.
pub fn reestimate_shift_report(before: &SimPolicy, after: &SimPolicy, corpus: &[SynthTask], seed: u64) -> Result<ShiftReport> {
    let tasks = task_index(corpus);
    let samples: Vec<_> = corpus.iter().map(SynthTask::to_sample).collect();
    let count = |policy: &SimPolicy| -> Result<[usize; 3]> {
        let oracle = SimOracle::new(policy.clone(), tasks.clone());
        let est = coarse_estimate(&samples, &oracle, seed)?;
        let mut bins = [0; 3];
        for r in est.records.iter().filter(|r| !r.failed) {
            if let Some(b) = r.coarse_bin {
                bins[b.index()] += 1;
            }
        }
        Ok(bins)
    };
    Ok(ShiftReport {
        before: count(before)?,
        after: count(after)?,
    })
}

/// One line of the paired comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub mode: Mode,
    pub steps: usize,
    pub invalid_groups_cum: u64,
    pub final_corpus_accuracy: f64,
    pub final_cs: f64,
    pub frontier_k: usize,
    pub merges: usize,
}

/// Run every mode on the same seeds. The adaptive run goes first and its
/// length becomes the step budget of the two baselines, so all modes are
/// compared after the same amount of training; the fixed schedule splits
/// that budget evenly over the buckets. `visit` sees every run as soon as it
/// finishes; runs are not kept.
pub fn paired_comparison(
    cfg: &SimConfig,
    seeds: &[u64],
    mut visit: impl FnMut(&PairedRow, &SimRun) -> Result<()>,
) -> Result<Vec<PairedRow>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let corpus = generate_corpus(&cfg.corpus, seed);
        let ada = train(cfg, &corpus, Mode::Adacurl, seed)?;
        let budget = ada.trace.rows.len() as u64;
        let mut base_cfg = cfg.clone();
        base_cfg.scheduler.max_steps = budget.max(1);
        base_cfg.naive_stage_steps = Some(budget.div_ceil(cfg.scheduler.k_buckets as u64).max(1));
        let mut pending = Some(ada);
        for mode in Mode::ALL {
            let run = match pending.take() {
                Some(r) => r,
                None => train(&base_cfg, &corpus, mode, seed)?,
            };
            let s = run.summary();
            let row = PairedRow {
                seed,
                mode: run.mode,
                steps: s.steps,
                invalid_groups_cum: s.invalid_groups_cum,
                final_corpus_accuracy: s.corpus_accuracy_final,
                final_cs: s.final_cs,
                frontier_k: s.frontier_k,
                merges: s.merges.len(),
            };
            visit(&row, &run)?;
            out.push(row);
        }
    }
    Ok(out)
}

/// Simulator learner for multi-round training. Each round appends to the
/// shared event log.
pub struct SimLearner<'a> {
    pub config: &'a SimConfig,
    pub corpus: &'a [SynthTask],
    tasks: Arc<HashMap<String, SynthTask>>,
    pub policy: SimPolicy,
    pub events: EventLog,
    pub seed: u64,
}

impl<'a> SimLearner<'a> {
    pub fn new(config: &'a SimConfig, corpus: &'a [SynthTask], seed: u64) -> Self {
        SimLearner {
            config,
            corpus,
            tasks: task_index(corpus),
            policy: config.fresh_policy(),
            events: EventLog::default(),
            seed,
        }
    }
}

impl RoundLearner for SimLearner<'_> {
    type Oracle = SimOracle;
    type Trace = MetricsTrace;

    fn oracle(&self) -> SimOracle {
        SimOracle::new(self.policy.clone(), self.tasks.clone())
    }

    fn train_round(&mut self, round: u32, scheduler: &mut Scheduler) -> Result<MetricsTrace> {
        let ctx = RoundContext {
            config: self.config,
            tasks: &self.tasks,
            eval: self.corpus,
            round,
            seed: self.seed,
        };
        train_round(&ctx, &mut self.policy, scheduler, Some(&mut self.events))
    }
}

/// Outcome of a multi-round simulator run.
pub struct MultiRoundRun {
    pub corpus: Vec<SynthTask>,
    pub report: RoundsReport<MetricsTrace>,
    pub policy_before: SimPolicy,
    pub policy_after: SimPolicy,
    pub events: EventLog,
}

impl MultiRoundRun {
    /// Metrics rows of all rounds in order; each row carries its round.
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.report.rounds.iter().flat_map(|r| r.trace.rows.iter().cloned()).collect()
    }
}

/// Generate the corpus for `seed` and train for up to `n_rounds` rounds,
/// re-estimating difficulty with the current policy before each one.
pub fn run_multi_round(cfg: &SimConfig, mode: Mode, n_rounds: u32, min_difficulty: f64, seed: u64) -> Result<MultiRoundRun> {
    cfg.validate()?;
    let corpus = generate_corpus(&cfg.corpus, seed);
    let samples: Vec<_> = corpus.iter().map(SynthTask::to_sample).collect();
    let mut learner = SimLearner::new(cfg, &corpus, seed);
    let policy_before = learner.policy.clone();
    let sched_cfg = crate::types::SchedulerConfig {
        seed,
        ..cfg.scheduler.clone()
    };
    let report = run_rounds(
        &mut learner,
        &samples,
        &cfg.pipeline,
        &sched_cfg,
        cfg.scheduler_mode(mode),
        n_rounds,
        min_difficulty,
        seed,
    )?;
    let policy_after = learner.policy.clone();
    let events = std::mem::take(&mut learner.events);
    Ok(MultiRoundRun {
        corpus,
        report,
        policy_before,
        policy_after,
        events,
    })
}
