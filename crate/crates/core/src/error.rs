//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A descriptor or argument violates one of its invariants.
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    /// A configuration file could not be read or does not match the schema.
    /// `path` identifies the offending key path or file.
    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    /// A pipeline stage does not fit the cards its directive assigns.
    #[error(
        "stage {stage} ({kind}, layer {layer:?}) needs {needed_bytes} B but its \
         {cards} card(s) provide {available_bytes} B"
    )]
    StageCapacity {
        stage: usize,
        kind: String,
        layer: Option<u64>,
        needed_bytes: u64,
        available_bytes: u64,
        cards: u64,
    },

    /// A workload asks for more simultaneous users than the plan supports.
    #[error("workload of {requested} users exceeds plan capacity of {capacity}")]
    Capacity { requested: u64, capacity: u64 },

    /// A latency target cannot be met by any non-negative stage time.
    #[error(
        "calibration infeasible: target {target_seconds} s does not exceed \
         the {hop_seconds} s spent on hops"
    )]
    Calibration {
        target_seconds: f64,
        hop_seconds: f64,
    },

    #[error("degenerate timing model: {0}")]
    DegenerateTiming(String),

    #[error("plan has no stages")]
    EmptyPlan,

    #[error("unknown circuit {0}")]
    UnknownCircuit(u32),

    /// Credit discipline was violated. Unreachable in normal operation; the
    /// protocol checker and forced-fault tests observe it.
    #[error("protocol integrity violated: {0}")]
    Protocol(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("empty report: no completed sequences")]
    EmptyReport,

    #[error("utilization undefined: allocated power must be positive")]
    UndefinedAllocation,

    /// Exhaustive or randomized protocol verification found a counterexample.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            detail: detail.into(),
        }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
