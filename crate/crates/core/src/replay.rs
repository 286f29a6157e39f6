//! Offline replay of an event log.
//!
//! Replay rebuilds the scheduler from each round's init event and feeds it
//! the logged reports. Every grant, merge, state value and stop must come
//! out identical, and every logged advantage and loss must be reproducible
//! bit for bit from the logged rewards, ratios and KL values.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, EventLog, InitPayload, MetricsRow, ReportPayload, EVENT_FORMAT};
use crate::grpo::{group_advantage, grpo_loss, LossInputs};
use crate::scheduler::{MergeEvent, Scheduler};
use crate::types::RolloutGroup;

/// What a successful replay went through.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: usize,
    pub rounds: usize,
    pub grants: usize,
    pub reports: usize,
    pub merges: usize,
    pub stops: usize,
    /// Engine versions named by the init events.
    pub engine_versions: Vec<String>,
    pub metrics_rows_checked: usize,
}

fn diverge(step: u64, what: impl Into<String>) -> Error {
    Error::ReplayDivergence { step, what: what.into() }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-step aggregates rebuilt from the reports, for the metrics check.
#[derive(Debug, Clone)]
struct StepAggregate {
    round: u32,
    step: u64,
    reset_reference: bool,
    n: usize,
    sum_accuracy: f64,
    sum_loss: f64,
    invalid: u64,
    cs: f64,
    frontier_k: usize,
    buffer_fill: usize,
    invalid_groups_cum: u64,
}

struct Round {
    init: InitPayload,
    scheduler: Scheduler,
    produced: VecDeque<MergeEvent>,
    logged: VecDeque<MergeEvent>,
    stopped: bool,
}

impl Round {
    fn match_merges(&mut self, step: u64) -> Result<usize> {
        let mut matched = 0;
        while let (Some(p), Some(l)) = (self.produced.front(), self.logged.front()) {
            if p != l {
                return Err(diverge(step, format!("merge mismatch: replay {p:?}, log {l:?}")));
            }
            self.produced.pop_front();
            self.logged.pop_front();
            matched += 1;
        }
        Ok(matched)
    }
}

struct Replayer {
    round: Option<Round>,
    report: ReplayReport,
    steps: Vec<StepAggregate>,
}

impl Replayer {
    fn active(&mut self, step: u64) -> Result<&mut Round> {
        match self.round.as_mut() {
            Some(r) if !r.stopped => Ok(r),
            Some(_) => Err(diverge(step, "event after the round's stop event")),
            None => Err(diverge(step, "event before any init event")),
        }
    }

    fn init(&mut self, step: u64, init: &InitPayload) -> Result<()> {
        if let Some(r) = &self.round {
            if !r.stopped {
                return Err(diverge(step, "new round starts before the previous one stopped"));
            }
        }
        if init.format != EVENT_FORMAT {
            return Err(Error::VersionMismatch {
                expected: format!("event format {EVENT_FORMAT}"),
                found: format!("event format {}", init.format),
            });
        }
        let scheduler = Scheduler::new(init.config.clone(), init.mode, init.buckets.clone())?;
        if step != 0 {
            return Err(diverge(step, "init event must carry step 0"));
        }
        self.report.rounds += 1;
        if !self.report.engine_versions.contains(&init.engine_version) {
            self.report.engine_versions.push(init.engine_version.clone());
        }
        self.round = Some(Round {
            init: init.clone(),
            scheduler,
            produced: VecDeque::new(),
            logged: VecDeque::new(),
            stopped: false,
        });
        Ok(())
    }

    fn grant(&mut self, step: u64, ids: &[String], reset: bool) -> Result<()> {
        let r = self.active(step)?;
        let grant = r.scheduler.next_batch(ids.len()).map_err(|e| diverge(step, e.to_string()))?;
        if grant.step != step {
            return Err(diverge(step, format!("grant replayed at step {}", grant.step)));
        }
        if grant.sample_ids != ids {
            return Err(diverge(step, "granted sample ids differ"));
        }
        if grant.reset_reference != reset {
            return Err(diverge(step, "reset_reference flag differs"));
        }
        r.produced.extend(grant.merges);
        let matched = r.match_merges(step)?;
        let round = r.init.round;
        self.report.merges += matched;
        self.report.grants += 1;
        self.steps.push(StepAggregate {
            round,
            step,
            reset_reference: reset,
            n: 0,
            sum_accuracy: 0.0,
            sum_loss: 0.0,
            invalid: 0,
            cs: 0.0,
            frontier_k: 0,
            buffer_fill: 0,
            invalid_groups_cum: 0,
        });
        Ok(())
    }

    fn report_group(&mut self, step: u64, p: &ReportPayload) -> Result<()> {
        let r = self.active(step)?;
        let cfg = r.scheduler.config().clone();
        if p.rewards.len() != r.init.group_size || p.accuracy.len() != p.rewards.len() {
            return Err(diverge(step, format!("group of `{}` has the wrong size", p.sample_id)));
        }
        if step >= cfg.t_format_cutoff && !same_bits(&p.rewards, &p.accuracy) {
            return Err(diverge(step, format!("rewards of `{}` differ from accuracy after the cutoff", p.sample_id)));
        }
        let (advantages, gated) = group_advantage(&p.rewards, cfg.epsilon_adv)?;
        if !same_bits(&advantages, &p.advantages) || gated != p.kl_gated_off {
            return Err(diverge(step, format!("advantages of `{}` do not follow from its rewards", p.sample_id)));
        }
        let loss = grpo_loss(&LossInputs {
            advantages,
            ratio: p.ratios.clone(),
            clip_range: r.init.clip_range,
            kl_per_rollout: vec![p.kl; p.rewards.len()],
            beta_kl: cfg.beta_kl,
            kl_gated_off: gated,
        })?;
        if loss.to_bits() != p.loss.to_bits() {
            return Err(diverge(step, format!("loss of `{}` recomputes to {loss}, log says {}", p.sample_id, p.loss)));
        }
        if r.scheduler.bucket_of(&p.sample_id) != Some(p.bucket) {
            return Err(diverge(step, format!("bucket of `{}` differs", p.sample_id)));
        }
        let mut group = RolloutGroup::from_rewards(p.sample_id.clone(), p.rewards.clone(), cfg.epsilon_adv)?;
        group.accuracy_mean = p.accuracy.iter().sum::<f64>() / p.accuracy.len() as f64;
        let merge = r.scheduler.report_group(&group, step).map_err(|e| diverge(step, e.to_string()))?;
        let snap = r.scheduler.snapshot();
        if snap.cs.to_bits() != p.cs.to_bits()
            || snap.frontier_k != p.frontier_k
            || snap.buffer_fill != p.buffer_fill
            || snap.invalid_groups_cum != p.invalid_groups_cum
        {
            return Err(diverge(step, format!("scheduler state after `{}` differs", p.sample_id)));
        }
        r.produced.extend(merge);
        let matched = r.match_merges(step)?;
        self.report.merges += matched;
        self.report.reports += 1;
        let agg = self
            .steps
            .last_mut()
            .filter(|a| a.step == step)
            .ok_or_else(|| diverge(step, "report without a grant"))?;
        agg.n += 1;
        agg.sum_accuracy += group.accuracy_mean;
        agg.sum_loss += p.loss;
        agg.invalid += u64::from(gated);
        agg.cs = snap.cs;
        agg.frontier_k = snap.frontier_k;
        agg.buffer_fill = snap.buffer_fill;
        agg.invalid_groups_cum = snap.invalid_groups_cum;
        Ok(())
    }

    fn merge(&mut self, step: u64, m: &MergeEvent) -> Result<()> {
        let r = self.active(step)?;
        r.logged.push_back(m.clone());
        let matched = r.match_merges(step)?;
        self.report.merges += matched;
        Ok(())
    }

    fn stop(&mut self, step: u64, reason: crate::scheduler::StopReason) -> Result<()> {
        let r = self.active(step)?;
        if !r.produced.is_empty() || !r.logged.is_empty() {
            return Err(diverge(step, "merge events left unmatched at stop"));
        }
        if r.scheduler.should_stop() != Some(reason) {
            return Err(diverge(step, format!("log stops with {reason} but the scheduler does not")));
        }
        r.stopped = true;
        self.report.stops += 1;
        Ok(())
    }
}

/// Replay `log`. Any disagreement is a [`Error::ReplayDivergence`] naming
/// the step.
pub fn replay(log: &EventLog) -> Result<ReplayReport> {
    Ok(run(log)?.0)
}

fn run(log: &EventLog) -> Result<(ReplayReport, Vec<StepAggregate>)> {
    let mut rp = Replayer {
        round: None,
        report: ReplayReport::default(),
        steps: Vec::new(),
    };
    for rec in &log.records {
        let step = rec.step;
        match &rec.body {
            Event::Init(init) => rp.init(step, init)?,
            Event::Grant(g) => rp.grant(step, &g.sample_ids, g.reset_reference)?,
            Event::Report(p) => rp.report_group(step, p)?,
            Event::Merge(m) => rp.merge(step, m)?,
            Event::Stop(s) => rp.stop(step, s.reason)?,
        }
        rp.report.records += 1;
    }
    match &rp.round {
        None => return Err(Error::Malformed("event log holds no init event".into())),
        Some(r) if !r.stopped => {
            return Err(diverge(r.scheduler.state().step, "log ends before the round's stop event"));
        }
        _ => {}
    }
    Ok((rp.report, rp.steps))
}

/// Replay `log` and check that `metrics` is the table it implies.
/// Columns that depend on the policy itself (KL, entropy, corpus accuracy)
/// are not checked.
pub fn replay_with_metrics(log: &EventLog, metrics: &[MetricsRow]) -> Result<ReplayReport> {
    let (mut report, steps) = run(log)?;
    if steps.len() != metrics.len() {
        return Err(diverge(
            steps.last().map_or(0, |s| s.step),
            format!("log has {} steps, metrics table has {} rows", steps.len(), metrics.len()),
        ));
    }
    for (agg, row) in steps.iter().zip(metrics) {
        let n = agg.n as f64;
        let ok = row.round == agg.round
            && row.step == agg.step
            && row.reset_reference == u8::from(agg.reset_reference)
            && row.invalid_groups == agg.invalid
            && row.invalid_groups_cum == agg.invalid_groups_cum
            && row.cs.to_bits() == agg.cs.to_bits()
            && row.frontier_k == agg.frontier_k
            && row.buffer_fill == agg.buffer_fill
            && row.mean_accuracy_reward.to_bits() == (agg.sum_accuracy / n).to_bits()
            && row.mean_loss.to_bits() == (agg.sum_loss / n).to_bits();
        if !ok {
            return Err(diverge(agg.step, format!("metrics row for round {} step {} differs", agg.round, agg.step)));
        }
    }
    report.metrics_rows_checked = metrics.len();
    Ok(report)
}
