use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("unsupported branching factor {0} (only binary trees are supported)")]
    UnsupportedBranching(usize),

    #[error("level mismatch: expected process on level {expected}, got level {got}")]
    LevelMismatch { expected: usize, got: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid problem data: {0}")]
    InvalidData(String),

    #[error("penalty parameter must be positive, got {0}")]
    NonPositivePenalty(f64),

    #[error("subproblem not uniformly convex at node {node}: smallest eigenvalue of K is {min_eig:e}")]
    IndefiniteGain { node: usize, min_eig: f64 },

    #[error("uniform convexity not certified: delta_hat = {0:e}")]
    NotUniformlyConvex(f64),

    #[error("terminal map is not surjective: sigma_min = {0:e}")]
    NotSurjective(f64),

    #[error("riccati solution computed with rho = {ric} but called with rho = {call}")]
    PenaltyMismatch { ric: f64, call: f64 },

    #[error("dense problem too large: {0} control variables (limit {1})")]
    SizeGuard(usize, usize),

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("rank condition failed: rank(MD) = {rank}, need {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(context: &str, expected: impl ToString, got: impl ToString) -> Error {
    Error::DimensionMismatch {
        context: context.to_string(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
