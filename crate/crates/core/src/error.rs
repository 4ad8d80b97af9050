use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model, policy or config field violates its contract.
    #[error("validation failed: {0}")]
    Validation(String),

    /// History support at `step` outgrew the enumeration cap.
    #[error("history support at step {step} exceeds the cap of {cap} atoms")]
    HistoryExplosion { step: usize, cap: usize },

    #[error("no table entry for observation {obs} with history {history:?} at step {step}")]
    UnknownHistoryAtom {
        step: usize,
        obs: usize,
        history: Vec<(usize, usize)>,
    },

    /// Malformed dataset or document; `line` is 1-based, 0 when unknown.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("rank condition fails at step {0}")]
    RankDeficient(usize),

    #[error("behavior probability of action {action} in state {state} is zero at step {step}")]
    ZeroBehaviorProb {
        step: usize,
        state: usize,
        action: usize,
    },

    /// Linear bridge system has no exact solution.
    #[error("bridge system at step {step} is inconsistent (relative residual {residual:e})")]
    Inconsistent { step: usize, residual: f64 },

    #[error("target policy reaches states outside behavior support at step {0}")]
    Uncovered(usize),

    #[error("dual second-moment matrix is degenerate")]
    DegenerateDual,

    #[error("primal normal matrix is degenerate")]
    DegeneratePrimal,

    #[error("confidence region is empty")]
    EmptyRegion,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for I/O and document-format failures.
    pub fn is_format(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Json(_) | Error::Format { .. })
    }
}
