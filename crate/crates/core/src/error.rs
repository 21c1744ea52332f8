use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer index {index} out of range for depth {depth}")]
    IndexOutOfRange { index: usize, depth: usize },

    #[error("depth must be at least 1")]
    ZeroDepth,

    #[error("malformed mask key {0:?}")]
    BadMaskKey(String),

    #[error("mask has no cardinality-preserving neighbors (k={k}, depth={depth})")]
    EmptyNeighborhood { k: usize, depth: usize },

    #[error("depth mismatch: expected {expected}, got {actual}")]
    DepthMismatch { expected: usize, actual: usize },

    #[error("budget k={k} exceeds depth {depth}")]
    BudgetTooLarge { k: usize, depth: usize },

    #[error("evaluation budget of {0} exhausted")]
    BudgetExhausted(u64),

    #[error("task item {0} has no incorrect completions")]
    ItemMalformed(usize),

    #[error("invalid landscape: {0}")]
    InvalidLandscape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown algorithm {0:?}")]
    UnknownAlgorithm(String),

    #[error("objective does not provide a cheap proxy")]
    ProxyUnavailable,

    #[error("search space of {0} subsets exceeds the enumeration cap")]
    SpaceTooLarge(u128),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("evaluator handshake rejected: {0}")]
    HandshakeMismatch(String),

    #[error("evaluator protocol error: {0}")]
    Protocol(String),

    #[error("evaluator did not answer within {0:?}")]
    Timeout(std::time::Duration),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that originate in an external evaluator process.
    pub fn is_evaluator_failure(&self) -> bool {
        matches!(
            self,
            Error::HandshakeMismatch(_) | Error::Protocol(_) | Error::Timeout(_)
        )
    }
}
