//! Error type shared by every engine module.

use crate::types::CoarseBin;

/// Engine error.
///
/// Every variant maps onto a stable, hyphenated kind string (see
/// [`Error::kind`]) that the command-line front end prints verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bin {bin} exhausted: requested {requested} samples, {available} available")]
    BinExhausted {
        bin: CoarseBin,
        requested: usize,
        available: usize,
    },

    #[error("no records left after keeping difficulties in [{lo}, {hi}]")]
    EmptyCurriculum { lo: f64, hi: f64 },

    #[error("cannot split {records} records into {buckets} buckets")]
    TooManyBuckets { records: usize, buckets: usize },

    #[error("batch of {requested} exceeds the eligible pool of {pool} samples")]
    PoolTooSmall { requested: usize, pool: usize },

    #[error("curriculum finished ({0})")]
    CurriculumFinished(crate::scheduler::StopReason),

    #[error("sample `{0}` was reported but never granted")]
    UngrantedSample(String),

    #[error("corpus exhausted before round {round}: no samples survived selection")]
    CorpusExhausted { round: u32 },

    #[error("oracle failed on sample `{sample_id}`: {message}")]
    Oracle { sample_id: String, message: String },

    #[error("engine version mismatch: document written by {found}, this engine is {expected}")]
    VersionMismatch { expected: String, found: String },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("scheduler is being mutated concurrently")]
    ConcurrentMutation,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("replay diverged at step {step}: {what}")]
    ReplayDivergence { step: u64, what: String },

    #[error("line {line}: {source}")]
    Jsonl {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::BinExhausted { .. } => "bin-exhausted",
            Error::EmptyCurriculum { .. } => "empty-curriculum",
            Error::TooManyBuckets { .. } => "too-many-buckets",
            Error::PoolTooSmall { .. } => "pool-too-small",
            Error::CurriculumFinished(_) => "curriculum-finished",
            Error::UngrantedSample(_) => "ungranted-sample",
            Error::CorpusExhausted { .. } => "corpus-exhausted",
            Error::Oracle { .. } => "estimation-failed",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::Malformed(_) => "malformed-document",
            Error::ConcurrentMutation => "concurrent-mutation",
            Error::Config(_) => "invalid-config",
            Error::Contract(_) => "contract-violation",
            Error::ReplayDivergence { .. } => "replay-divergence",
            Error::Jsonl { .. } | Error::Json(_) => "malformed-document",
            Error::Csv(_) => "malformed-document",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
