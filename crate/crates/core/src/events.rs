//! Append-only event log and the per-step metrics table.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::scheduler::{Bucket, MergeEvent, SchedulerMode, StopReason};
use crate::types::SchedulerConfig;

/// Version of the event-log schema. Replay accepts logs of this format from
/// any engine version.
pub const EVENT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub step: u64,
    #[serde(flatten)]
    pub body: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum Event {
    Init(InitPayload),
    Grant(GrantPayload),
    Report(ReportPayload),
    Merge(MergeEvent),
    Stop(StopPayload),
}

/// Everything replay needs to rebuild the scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitPayload {
    pub format: u32,
    pub engine_version: String,
    pub round: u32,
    pub config: SchedulerConfig,
    pub mode: SchedulerMode,
    pub buckets: Vec<Bucket>,
    pub batch_size: usize,
    pub group_size: usize,
    /// Clip range used by the loss; `None` when clipping was off.
    pub clip_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantPayload {
    pub sample_ids: Vec<String>,
    pub reset_reference: bool,
}

/// One reported rollout group with the loss inputs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPayload {
    pub sample_id: String,
    pub bucket: usize,
    pub accuracy: Vec<f64>,
    /// Rewards that produced the advantages (composite before the cutoff).
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub kl_gated_off: bool,
    /// Importance ratios at the logged loss evaluation.
    pub ratios: Vec<f64>,
    /// Exact KL of the policy from the reference on this sample.
    pub kl: f64,
    pub loss: f64,
    /// Scheduler state after the report.
    pub cs: f64,
    pub frontier_k: usize,
    pub buffer_fill: usize,
    pub invalid_groups_cum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopPayload {
    pub reason: StopReason,
}

/// In-memory event log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
}

impl EventLog {
    pub fn push(&mut self, step: u64, body: Event) {
        self.records.push(EventRecord { step, body });
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn read_jsonl<R: Read>(r: R) -> Result<Self> {
        Ok(EventLog {
            records: crate::io::read_jsonl(r)?,
        })
    }
}

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 13] = [
    "step",
    "mean_accuracy_reward",
    "cs",
    "frontier_k",
    "invalid_groups_cum",
    "buffer_fill",
    "round",
    "reset_reference",
    "invalid_groups",
    "mean_loss",
    "mean_kl",
    "mean_entropy",
    "corpus_accuracy",
];

/// One training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean accuracy over the step's rollouts.
    pub mean_accuracy_reward: f64,
    pub cs: f64,
    pub frontier_k: usize,
    pub invalid_groups_cum: u64,
    pub buffer_fill: usize,
    pub round: u32,
    /// 1 when the reference policy was reset at the start of the step.
    pub reset_reference: u8,
    /// Reward-uniform groups in this step.
    pub invalid_groups: u64,
    /// Mean per-group objective value.
    pub mean_loss: f64,
    /// Mean KL of the policy from its reference over the step's samples,
    /// before the gate is applied.
    pub mean_kl: f64,
    /// Mean policy entropy over the step's samples.
    pub mean_entropy: f64,
    /// Expected accuracy over the whole corpus after the step's update.
    pub corpus_accuracy: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(METRICS_COLUMNS)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn metrics_csv_bytes(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_metrics_csv(rows, &mut buf)?;
    Ok(buf)
}

pub fn read_metrics_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(crate::Error::Malformed(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}
