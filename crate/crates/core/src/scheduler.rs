//! Competence-driven bucket scheduler.
//!
//! The sorted curriculum is cut into `K` buckets. Training starts on the
//! easiest bucket; the mean accuracy of groups drawn from the newest bucket
//! feeds a competence score, and when that score reaches `(k - 1) / K` the
//! next bucket `k` joins the pool. Earlier buckets stay in the pool so they
//! keep being revisited. The first grant after a merge asks the trainer to
//! reset its reference policy.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_sample_seed;
use crate::types::{DifficultyRecord, RolloutGroup, SchedulerConfig};
use crate::ENGINE_VERSION;

pub const CHECKPOINT_FORMAT: &str = "currl-scheduler-checkpoint/1";

/// One difficulty-ordered segment of the curriculum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    /// 1-based.
    pub index: usize,
    pub sample_ids: Vec<String>,
}

/// Cut an ascending-difficulty sequence into `k` consecutive buckets whose
/// sizes differ by at most one; the first `len % k` buckets get the extra
/// sample.
pub fn partition_buckets(sorted_records: &[DifficultyRecord], k: usize) -> Result<Vec<Bucket>> {
    if k == 0 {
        return Err(Error::Config("bucket count must be >= 1".into()));
    }
    if k > sorted_records.len() {
        return Err(Error::TooManyBuckets {
            records: sorted_records.len(),
            buckets: k,
        });
    }
    let sorted = sorted_records.windows(2).all(|w| match (w[0].difficulty, w[1].difficulty) {
        (Some(a), Some(b)) => a <= b,
        _ => false,
    });
    if !sorted || sorted_records.iter().any(|r| r.difficulty.is_none()) {
        return Err(Error::contract("partition input must be sorted by ascending difficulty"));
    }
    let n = sorted_records.len();
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(Bucket {
            index: i + 1,
            sample_ids: sorted_records[start..start + len].iter().map(|r| r.sample_id.clone()).collect(),
        });
        start += len;
    }
    Ok(out)
}

/// The competence update, clamped to `[0, 1]`:
/// `cs + (r - 0.5) * max(1 - cs, gamma)`.
pub fn competence_update(cs: f64, mean_reward: f64, gamma: f64) -> f64 {
    (cs + (mean_reward - 0.5) * (1.0 - cs).max(gamma)).clamp(0.0, 1.0)
}

/// Merge threshold for bucket `k` (1-based) out of `k_total`.
pub fn merge_threshold(k: usize, k_total: usize) -> f64 {
    (k - 1) as f64 / k_total as f64
}

/// How the pool grows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerMode {
    /// Buckets merge when the competence score crosses their threshold.
    Adaptive,
    /// Bucket `k + 1` merges at step `k * stage_steps`, whatever the
    /// competence score says.
    NaiveFixed { stage_steps: u64 },
    /// Everything is eligible from the start; only the step budget ends the
    /// run.
    Shuffled,
}

impl fmt::Display for SchedulerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerMode::Adaptive => f.write_str("adacurl"),
            SchedulerMode::NaiveFixed { .. } => f.write_str("naive-cl"),
            SchedulerMode::Shuffled => f.write_str("shuffled"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    CurriculumComplete,
    MaxSteps,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::CurriculumComplete => f.write_str("curriculum-complete"),
            StopReason::MaxSteps => f.write_str("max-steps"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    /// Bucket the sample came from; always the frontier bucket.
    pub bucket: usize,
    pub reward: f64,
}

/// ChaCha8 position, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub key: String,
    /// Word position as a decimal string (u128).
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        let key: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngState {
            key,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        if self.key.len() != 64 {
            return Err(Error::Malformed("rng key must be 64 hex digits".into()));
        }
        let mut key = [0u8; 32];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.key[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Malformed("rng key is not hex".into()))?;
        }
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Malformed("rng word position is not an integer".into()))?;
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Checkpointable scheduler state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub cs: f64,
    /// Latest merged bucket, 1-based.
    pub frontier_k: usize,
    pub reward_buffer: VecDeque<BufferEntry>,
    /// Number of batches granted so far.
    pub step: u64,
    pub trained_ids: BTreeSet<String>,
    pub invalid_groups_cum: u64,
    /// Set by a merge, consumed by the next grant.
    pub pending_reset: bool,
    pub rng_state: RngState,
}

/// A merge of bucket `bucket` into the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub step: u64,
    pub bucket: usize,
    /// Competence after the update that triggered the merge (naive merges
    /// record the score at merge time).
    pub cs_trigger: f64,
    /// Re-initialized competence, `(bucket - 1) / K`.
    pub cs_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchGrant {
    pub step: u64,
    pub sample_ids: Vec<String>,
    /// Trainer must overwrite its reference policy with the current one
    /// before using this batch.
    pub reset_reference: bool,
    /// Fixed-schedule merges applied just before this grant.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merges: Vec<MergeEvent>,
}

/// Read-only snapshot for metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerSnapshot {
    pub step: u64,
    pub cs: f64,
    pub frontier_k: usize,
    pub invalid_groups_cum: u64,
    pub buffer_fill: usize,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    config: SchedulerConfig,
    mode: SchedulerMode,
    buckets: Vec<Bucket>,
    bucket_of: HashMap<String, usize>,
    state: SchedulerState,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, mode: SchedulerMode, buckets: Vec<Bucket>) -> Result<Self> {
        config.validate()?;
        if buckets.len() != config.k_buckets {
            return Err(Error::Config(format!(
                "{} buckets supplied for k_buckets = {}",
                buckets.len(),
                config.k_buckets
            )));
        }
        let bucket_of = index_buckets(&buckets)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_sample_seed(config.seed, "scheduler", 0));
        let frontier_k = match mode {
            SchedulerMode::Shuffled => config.k_buckets,
            _ => 1,
        };
        let state = SchedulerState {
            cs: 0.0,
            frontier_k,
            reward_buffer: VecDeque::new(),
            step: 0,
            trained_ids: BTreeSet::new(),
            invalid_groups_cum: 0,
            pending_reset: false,
            rng_state: RngState::capture(&rng),
        };
        Ok(Scheduler {
            config,
            mode,
            buckets,
            bucket_of,
            state,
            rng,
        })
    }

    /// Partition `sorted_records` and build a fresh scheduler over them.
    pub fn from_records(config: SchedulerConfig, mode: SchedulerMode, sorted_records: &[DifficultyRecord]) -> Result<Self> {
        let buckets = partition_buckets(sorted_records, config.k_buckets)?;
        Scheduler::new(config, mode, buckets)
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn mode(&self) -> SchedulerMode {
        self.mode
    }

    pub fn buckets(&self) -> &[Bucket] {
        &self.buckets
    }

    /// Current state; the RNG position is synced on every mutation.
    pub fn state(&self) -> &SchedulerState {
        &self.state
    }

    pub fn bucket_of(&self, sample_id: &str) -> Option<usize> {
        self.bucket_of.get(sample_id).copied()
    }

    pub fn snapshot(&self) -> SchedulerSnapshot {
        SchedulerSnapshot {
            step: self.state.step,
            cs: self.state.cs,
            frontier_k: self.state.frontier_k,
            invalid_groups_cum: self.state.invalid_groups_cum,
            buffer_fill: self.state.reward_buffer.len(),
        }
    }

    pub fn eligible_pool_len(&self) -> usize {
        self.buckets[..self.state.frontier_k].iter().map(|b| b.sample_ids.len()).sum()
    }

    fn merge_next(&mut self, step: u64) -> MergeEvent {
        let k = self.state.frontier_k + 1;
        let cs_trigger = self.state.cs;
        let cs_after = merge_threshold(k, self.config.k_buckets);
        self.state.frontier_k = k;
        self.state.cs = cs_after;
        self.state.reward_buffer.clear();
        self.state.pending_reset = true;
        MergeEvent {
            step,
            bucket: k,
            cs_trigger,
            cs_after,
        }
    }

    /// Draw `batch_size` distinct ids uniformly from the eligible pool.
    pub fn next_batch(&mut self, batch_size: usize) -> Result<BatchGrant> {
        if let Some(reason) = self.should_stop() {
            return Err(Error::CurriculumFinished(reason));
        }
        let step = self.state.step;
        let mut merges = Vec::new();
        if let SchedulerMode::NaiveFixed { stage_steps } = self.mode {
            while self.state.frontier_k < self.config.k_buckets && step >= self.state.frontier_k as u64 * stage_steps {
                merges.push(self.merge_next(step));
            }
        }
        let pool_len = self.eligible_pool_len();
        if batch_size == 0 || batch_size > pool_len {
            return Err(Error::PoolTooSmall {
                requested: batch_size,
                pool: pool_len,
            });
        }
        let mut picks = index::sample(&mut self.rng, pool_len, batch_size).into_vec();
        picks.sort_unstable();
        let pool: Vec<&String> = self.buckets[..self.state.frontier_k]
            .iter()
            .flat_map(|b| b.sample_ids.iter())
            .collect();
        let sample_ids: Vec<String> = picks.into_iter().map(|i| pool[i].clone()).collect();
        for id in &sample_ids {
            if !self.state.trained_ids.contains(id) {
                self.state.trained_ids.insert(id.clone());
            }
        }
        let reset_reference = std::mem::take(&mut self.state.pending_reset);
        self.state.step += 1;
        self.state.rng_state = RngState::capture(&self.rng);
        Ok(BatchGrant {
            step,
            sample_ids,
            reset_reference,
            merges,
        })
    }

    /// Record one rollout group granted at `step`.
    ///
    /// Only groups from the frontier bucket enter the reward buffer. Once the
    /// buffer holds `M` rewards and `step >= T_f`, the competence score is
    /// updated from their mean and the buffer emptied; if the score then
    /// reaches the next bucket's threshold, that bucket is merged. At most
    /// one merge happens per call.
    pub fn report_group(&mut self, group: &RolloutGroup, step: u64) -> Result<Option<MergeEvent>> {
        if !self.state.trained_ids.contains(&group.sample_id) {
            return Err(Error::UngrantedSample(group.sample_id.clone()));
        }
        if step >= self.state.step {
            return Err(Error::contract(format!(
                "report for step {step} but only {} batches were granted",
                self.state.step
            )));
        }
        let bucket = self.bucket_of[&group.sample_id];
        if group.kl_gated_off {
            self.state.invalid_groups_cum += 1;
        }
        if bucket != self.state.frontier_k {
            return Ok(None);
        }
        let m = self.config.m_window;
        self.state.reward_buffer.push_back(BufferEntry {
            bucket,
            reward: group.accuracy_mean,
        });
        while self.state.reward_buffer.len() > m {
            self.state.reward_buffer.pop_front();
        }
        if self.state.reward_buffer.len() < m || step < self.config.t_format_cutoff {
            return Ok(None);
        }
        let buf = &self.state.reward_buffer;
        let mean = buf.iter().map(|e| e.reward).sum::<f64>() / buf.len() as f64;
        self.state.cs = competence_update(self.state.cs, mean, self.config.gamma);
        self.state.reward_buffer.clear();

        if self.mode != SchedulerMode::Adaptive || self.state.frontier_k >= self.config.k_buckets {
            return Ok(None);
        }
        let next = self.state.frontier_k + 1;
        if self.state.cs >= merge_threshold(next, self.config.k_buckets) {
            return Ok(Some(self.merge_next(step)));
        }
        Ok(None)
    }

    /// Why the run should end, if it should.
    pub fn should_stop(&self) -> Option<StopReason> {
        if self.mode != SchedulerMode::Shuffled && self.state.frontier_k == self.config.k_buckets {
            let last = &self.buckets[self.config.k_buckets - 1];
            if last.sample_ids.iter().all(|id| self.state.trained_ids.contains(id)) {
                return Some(StopReason::CurriculumComplete);
            }
        }
        if self.state.step >= self.config.max_steps {
            return Some(StopReason::MaxSteps);
        }
        None
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            engine_version: ENGINE_VERSION.to_string(),
            config: self.config.clone(),
            mode: self.mode,
            buckets: self.buckets.clone(),
            state: self.state.clone(),
        }
    }

    pub fn restore(doc: Checkpoint) -> Result<Self> {
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Malformed(format!("unknown checkpoint format `{}`", doc.format)));
        }
        if doc.engine_version != ENGINE_VERSION {
            return Err(Error::VersionMismatch {
                expected: ENGINE_VERSION.to_string(),
                found: doc.engine_version,
            });
        }
        doc.config.validate()?;
        if doc.buckets.len() != doc.config.k_buckets {
            return Err(Error::Malformed("bucket count disagrees with config".into()));
        }
        let s = &doc.state;
        if s.frontier_k == 0 || s.frontier_k > doc.config.k_buckets {
            return Err(Error::Malformed(format!("frontier {} out of range", s.frontier_k)));
        }
        if !(0.0..=1.0).contains(&s.cs) {
            return Err(Error::Malformed(format!("competence {} outside [0, 1]", s.cs)));
        }
        if s.reward_buffer.len() > doc.config.m_window {
            return Err(Error::Malformed("reward buffer longer than M".into()));
        }
        let bucket_of = index_buckets(&doc.buckets)?;
        if let Some(id) = s.trained_ids.iter().find(|id| !bucket_of.contains_key(*id)) {
            return Err(Error::Malformed(format!("trained id `{id}` is in no bucket")));
        }
        let rng = s.rng_state.restore()?;
        Ok(Scheduler {
            config: doc.config,
            mode: doc.mode,
            buckets: doc.buckets,
            bucket_of,
            state: doc.state,
            rng,
        })
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.checkpoint())?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        Scheduler::restore(doc)
    }
}

fn index_buckets(buckets: &[Bucket]) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::new();
    for (i, b) in buckets.iter().enumerate() {
        if b.index != i + 1 {
            return Err(Error::Config(format!("bucket at position {} has index {}", i + 1, b.index)));
        }
        if b.sample_ids.is_empty() {
            return Err(Error::Config(format!("bucket {} is empty", b.index)));
        }
        for id in &b.sample_ids {
            if map.insert(id.clone(), b.index).is_some() {
                return Err(Error::Config(format!("sample `{id}` appears in two buckets")));
            }
        }
    }
    Ok(map)
}

/// Serialized scheduler: config, buckets, state and the writing engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub engine_version: String,
    pub config: SchedulerConfig,
    pub mode: SchedulerMode,
    pub buckets: Vec<Bucket>,
    pub state: SchedulerState,
}

/// Shared handle that enforces the single-writer contract at runtime:
/// overlapping mutations fail with [`Error::ConcurrentMutation`] instead of
/// blocking. Snapshots may run alongside each other.
#[derive(Debug, Clone)]
pub struct SharedScheduler {
    inner: Arc<RwLock<Scheduler>>,
}

impl SharedScheduler {
    pub fn new(scheduler: Scheduler) -> Self {
        SharedScheduler {
            inner: Arc::new(RwLock::new(scheduler)),
        }
    }

    fn write(&self) -> Result<parking_lot::RwLockWriteGuard<'_, Scheduler>> {
        self.inner.try_write().ok_or(Error::ConcurrentMutation)
    }

    pub fn next_batch(&self, batch_size: usize) -> Result<BatchGrant> {
        self.write()?.next_batch(batch_size)
    }

    pub fn report_group(&self, group: &RolloutGroup, step: u64) -> Result<Option<MergeEvent>> {
        self.write()?.report_group(group, step)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(self.write()?.checkpoint())
    }

    pub fn snapshot(&self) -> SchedulerSnapshot {
        self.inner.read().snapshot()
    }

    pub fn should_stop(&self) -> Option<StopReason> {
        self.inner.read().should_stop()
    }

    /// Hold the write lock for the duration of `f`.
    pub fn with_lock<T>(&self, f: impl FnOnce(&mut Scheduler) -> T) -> Result<T> {
        Ok(f(&mut *self.write()?))
    }
}
