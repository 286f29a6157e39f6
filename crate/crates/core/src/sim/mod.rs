//! Synthetic learner used to exercise the whole loop numerically.
//!
//! Tasks carry a ground-truth difficulty and a correct arm; a softmax bandit
//! policy with per-family logits attempts them. Training uses the real
//! scheduler and objective, so the curriculum, the sparse KL gate and the
//! reference resets all act on something that actually learns.

mod policy;
mod task;
mod train;

pub use policy::{rollout, FormatModel, Rollouts, SimOracle, SimPolicy};
pub use task::{default_mixture, generate_corpus, CorpusSpec, MixtureComponent, SynthTask};
pub use train::{
    paired_comparison, reestimate_shift_report, run, run_multi_round, train, train_round, BucketAccuracy, MetricsTrace,
    MultiRoundRun, PairedRow, RoundContext, RunSummary, ShiftReport, SimLearner, SimRun,
};

use serde::{Deserialize, Serialize};

use crate::difficulty::PipelineConfig;
use crate::error::{Error, Result};
use crate::scheduler::SchedulerMode;
use crate::types::SchedulerConfig;

/// Run mode of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Adacurl,
    NaiveCl,
    Shuffled,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Adacurl, Mode::NaiveCl, Mode::Shuffled];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Adacurl => "adacurl",
            Mode::NaiveCl => "naive-cl",
            Mode::Shuffled => "shuffled",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Simulator configuration; also the JSON config-file schema of the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub corpus: CorpusSpec,
    /// Capability kappa.
    pub capability: f64,
    /// Slope a of the success model.
    pub success_scale: f64,
    /// Difficulty weight b of the success model.
    pub difficulty_weight: f64,
    pub learning_rate: f64,
    /// Prompts per step.
    pub batch_size: usize,
    /// Rollouts per prompt (G).
    pub group_size: usize,
    /// Gradient passes over each batch against the same rollout policy.
    pub inner_epochs: usize,
    pub format: FormatModel,
    /// Use the clipped surrogate; off gives the plain ratio-weighted loss.
    pub clip: bool,
    pub pipeline: PipelineConfig,
    /// Stage length of the fixed schedule; defaults to `max_steps / K`.
    pub naive_stage_steps: Option<u64>,
    pub scheduler: SchedulerConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            corpus: CorpusSpec {
                n_tasks: 2000,
                n_arms: 4,
                n_families: 8,
                sources: vec![4.0, 3.0, 2.0, 1.0],
                mixture: default_mixture(),
            },
            capability: 0.0,
            success_scale: 4.0,
            difficulty_weight: 1.0,
            learning_rate: 0.02,
            batch_size: 16,
            group_size: 6,
            inner_epochs: 1,
            format: FormatModel {
                initial: 0.5,
                ramp_steps: 32,
            },
            clip: true,
            pipeline: PipelineConfig::default(),
            naive_stage_steps: None,
            scheduler: SchedulerConfig {
                m_window: 64,
                t_format_cutoff: 16,
                max_steps: 4000,
                ..SchedulerConfig::default()
            },
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        let c = &self.corpus;
        if c.n_tasks == 0 || c.n_arms < 2 || c.n_families == 0 || c.sources.is_empty() || c.mixture.is_empty() {
            return Err(Error::Config("corpus needs tasks, >= 2 arms, families, sources and a mixture".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be >= 2".into()));
        }
        if self.batch_size == 0 || self.inner_epochs == 0 {
            return Err(Error::Config("batch_size and inner_epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn scheduler_mode(&self, mode: Mode) -> SchedulerMode {
        match mode {
            Mode::Adacurl => SchedulerMode::Adaptive,
            Mode::Shuffled => SchedulerMode::Shuffled,
            Mode::NaiveCl => SchedulerMode::NaiveFixed {
                stage_steps: self
                    .naive_stage_steps
                    .unwrap_or(self.scheduler.max_steps / self.scheduler.k_buckets as u64),
            },
        }
    }

    pub fn fresh_policy(&self) -> SimPolicy {
        SimPolicy::uniform(
            self.corpus.n_families,
            self.corpus.n_arms,
            self.capability,
            self.success_scale,
            self.difficulty_weight,
            self.learning_rate,
        )
    }
}
