use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("transition row (h={h}, s={s}, a={a}) is not a probability vector: sum {sum}")]
    RowNotStochastic {
        h: usize,
        s: usize,
        a: usize,
        sum: f64,
    },
    #[error("reward at (h={h}, s={s}, a={a}) is {value}, outside [0, 1]")]
    RewardOutOfRange {
        h: usize,
        s: usize,
        a: usize,
        value: f64,
    },
    #[error("layer structure violated at (h={h}, s={s}, a={a}): {detail}")]
    LayerViolation {
        h: usize,
        s: usize,
        a: usize,
        detail: String,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown context `{0}`")]
    UnknownContext(String),
    #[error("unknown state {s} in layer {h}")]
    UnknownState { h: usize, s: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("inconsistent counters at (h={h}, s={s}, a={a}): next-state counts sum to {sum}, pair count is {total}")]
    InconsistentCounters {
        h: usize,
        s: usize,
        a: usize,
        sum: u64,
        total: u64,
    },
    #[error("exploration failed at {site}: collected {collected} samples, required {required}")]
    ExplorationFailed {
        site: Site,
        collected: u64,
        required: u64,
    },
    #[error("infeasible generator spec: {0}")]
    InfeasibleSpec(String),
    #[error("policy space too large for enumeration: {count} policies")]
    TooLarge { count: f64 },
    #[error("operation requires a finite context space")]
    InfiniteContextSpace,
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where an exploration quota was missed: a state-action pair or a whole layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Site {
    Pair { h: usize, s: usize, a: usize },
    Layer { h: usize },
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::Pair { h, s, a } => write!(f, "(h={h}, s={s}, a={a})"),
            Site::Layer { h } => write!(f, "layer {h}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
