//! Curriculum reinforcement-learning engine.
//!
//! * [`difficulty`]: coarse binning, stratified sampling, fine scoring and the
//!   difficulty band filter.
//! * [`scheduler`]: bucket partition, competence-driven expansion, data
//!   revisitation and reference-reset signalling.
//! * [`grpo`]: group-relative advantages and the sparse-KL clipped objective,
//!   with analytic gradients for categorical policies.
//! * [`sim`]: a synthetic softmax-bandit learner driven by the scheduler.
//! * [`self_pacing`]: later rounds that re-estimate difficulty with the
//!   trained policy and skip already-trained samples.
//! * [`events`] and [`replay`]: event log, metrics CSV and offline replay.

pub mod difficulty;
pub mod error;
pub mod events;
pub mod grpo;
pub mod io;
pub mod replay;
pub mod scheduler;
pub mod seed;
pub mod self_pacing;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
pub use types::{CoarseBin, DifficultyRecord, RolloutGroup, Sample, SchedulerConfig};

/// Version string written into checkpoints, event logs and manifests.
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
