//! Domain types shared across the engine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Name of the source corpus the sample came from.
    pub dataset: String,
    /// Opaque payload; the engine never looks inside.
    pub prompt: String,
    /// Canonical answer key. Must be non-empty.
    pub answer: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::contract("sample with empty id"));
        }
        if self.answer.is_empty() {
            return Err(Error::contract(format!("sample `{}` has an empty answer", self.id)));
        }
        Ok(())
    }
}

/// Coarse difficulty bin from the cheap few-rollout pass.
///
/// `G1` holds the hardest problems (almost never solved), `G3` the easiest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoarseBin {
    G1,
    G2,
    G3,
}

impl CoarseBin {
    pub const ALL: [CoarseBin; 3] = [CoarseBin::G1, CoarseBin::G2, CoarseBin::G3];

    /// Bin for `correct` successes out of `attempts`.
    ///
    /// With five attempts this is {0,1} -> G1, {2,3} -> G2, {4,5} -> G3. Other
    /// attempt counts use the same cut points expressed as success rates
    /// (below 2/5, below 4/5, the rest).
    pub fn from_correct(correct: u32, attempts: u32) -> CoarseBin {
        let (c, n) = (u64::from(correct), u64::from(attempts));
        if 5 * c < 2 * n {
            CoarseBin::G1
        } else if 5 * c < 4 * n {
            CoarseBin::G2
        } else {
            CoarseBin::G3
        }
    }

    pub fn index(self) -> usize {
        match self {
            CoarseBin::G1 => 0,
            CoarseBin::G2 => 1,
            CoarseBin::G3 => 2,
        }
    }
}

impl fmt::Display for CoarseBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CoarseBin::G1 => "G1",
            CoarseBin::G2 => "G2",
            CoarseBin::G3 => "G3",
        };
        f.write_str(s)
    }
}

/// Coarse and fine difficulty estimates for one sample.
///
/// Fields of a stage that has not run yet are `None`. A record whose oracle
/// call failed carries `failed = true` and is skipped by every downstream
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub sample_id: String,
    pub coarse_correct: Option<u32>,
    pub coarse_bin: Option<CoarseBin>,
    pub fine_correct: Option<u32>,
    pub n_fine: Option<u32>,
    pub difficulty: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

impl DifficultyRecord {
    pub fn coarse(sample_id: impl Into<String>, correct: u32, attempts: u32) -> Self {
        DifficultyRecord {
            sample_id: sample_id.into(),
            coarse_correct: Some(correct),
            coarse_bin: Some(CoarseBin::from_correct(correct, attempts)),
            fine_correct: None,
            n_fine: None,
            difficulty: None,
            failed: false,
        }
    }

    pub fn fine(sample_id: impl Into<String>, correct: u32, n: u32) -> Self {
        DifficultyRecord {
            sample_id: sample_id.into(),
            coarse_correct: None,
            coarse_bin: None,
            fine_correct: Some(correct),
            n_fine: Some(n),
            difficulty: Some(fine_difficulty(correct, n)),
            failed: false,
        }
    }

    pub fn failed(sample_id: impl Into<String>) -> Self {
        DifficultyRecord {
            sample_id: sample_id.into(),
            coarse_correct: None,
            coarse_bin: None,
            fine_correct: None,
            n_fine: None,
            difficulty: None,
            failed: true,
        }
    }
}

/// `1 - correct / n`, computed as `(n - correct) / n` so the result is the
/// correctly rounded quotient and band edges such as 0.2 compare exactly.
pub fn fine_difficulty(correct: u32, n: u32) -> f64 {
    f64::from(n.saturating_sub(correct)) / f64::from(n)
}

/// Scheduler and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Number of curriculum buckets K.
    pub k_buckets: usize,
    /// Floor of the competence decay factor.
    pub gamma: f64,
    /// Reward-buffer length M.
    pub m_window: usize,
    /// Step after which the format reward is dropped and competence updates
    /// may start.
    pub t_format_cutoff: u64,
    pub max_steps: u64,
    pub epsilon_adv: f64,
    pub clip_range: f64,
    pub beta_kl: f64,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            k_buckets: 4,
            gamma: 0.5,
            m_window: 512,
            t_format_cutoff: 64,
            max_steps: 1050,
            epsilon_adv: 1e-4,
            clip_range: 0.2,
            beta_kl: 0.04,
            seed: 0,
        }
    }
}

impl SchedulerConfig {
    /// Profile for small corpora: three buckets, shorter run.
    pub fn small_corpus() -> Self {
        SchedulerConfig {
            k_buckets: 3,
            max_steps: 650,
            ..SchedulerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_buckets == 0 {
            return Err(Error::Config("k_buckets must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.m_window == 0 {
            return Err(Error::Config("m_window must be >= 1".into()));
        }
        if !(self.epsilon_adv > 0.0) {
            return Err(Error::Config("epsilon_adv must be > 0".into()));
        }
        if !(self.clip_range > 0.0) {
            return Err(Error::Config("clip_range must be > 0".into()));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(Error::Config("beta_kl must be >= 0".into()));
        }
        Ok(())
    }
}

/// Rewards of one prompt's rollout group and the quantities derived from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub sample_id: String,
    /// Rewards that drive the advantage (composite before the format cutoff).
    pub rewards: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `rewards`.
    pub std: f64,
    pub advantages: Vec<f64>,
    /// True when the group is reward-uniform; its KL term is dropped.
    pub kl_gated_off: bool,
    /// Mean accuracy reward; this is what the competence buffer records.
    pub accuracy_mean: f64,
}
