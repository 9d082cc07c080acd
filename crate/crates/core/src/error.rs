use thiserror::Error;

/// Everything that can go wrong in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("channel state {w} out of range 1..={max}")]
    InvalidChannel { w: usize, max: usize },

    #[error("infeasible action {action} in state {state}")]
    InfeasibleAction { state: String, action: String },

    #[error("state space has {count} states, above the limit of {limit}")]
    SpaceTooLarge { count: usize, limit: usize },

    #[error("iteration did not converge within {iterations} sweeps (last delta {delta:.3e})")]
    ConvergenceFailure { iterations: usize, delta: f64 },

    #[error("chain is not unichain: {0}")]
    NonUnichain(String),

    #[error("invalid mixing bracket: need c_high ({c_high}) > c_max ({c_max}) > c_low ({c_low})")]
    InvalidBracket { c_high: f64, c_max: f64, c_low: f64 },

    #[error("no policy meets the energy budget {budget} at sampling rate {rate}")]
    NoFeasiblePolicy { rate: String, budget: f64 },

    #[error("no feasible sampling rate on the grid")]
    AllInfeasible,

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("policy file digest mismatch: file has {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
