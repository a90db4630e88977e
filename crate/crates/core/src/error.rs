use thiserror::Error;

use crate::model::RelayState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid load profile: {0}")]
    InvalidLoads(String),
    #[error("invalid relay state: {0}")]
    InvalidState(String),
    #[error("server index {index} out of range for {m} servers")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("a server cannot exchange requests with itself (server {0})")]
    SelfExchange(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("instance too large for {what}: m = {m}, limit {limit}")]
    TooLarge { what: &'static str, m: usize, limit: usize },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("a reference cost is required for threshold stopping")]
    MissingReference,
    #[error("replication factor {r} is infeasible: it needs at least {r} reachable servers per organization, found {available}")]
    InfeasibleReplication { r: usize, available: usize },
    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        best: Box<RelayState>,
    },
    #[error("best-response dynamics did not settle within {rounds} rounds")]
    NashNotConverged {
        rounds: usize,
        state: Box<RelayState>,
        max_change_trace: Vec<f64>,
    },
    #[error("MinE did not reach the threshold within {iterations} iterations (last gap {gap:e})")]
    ThresholdNotReached {
        iterations: usize,
        gap: f64,
        state: Box<RelayState>,
        costs: Vec<f64>,
    },
    #[error("latency file, line {line}: {message}")]
    LatencyFormat { line: usize, message: String },
    #[error("task file, line {line}: {message}")]
    TaskFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numerics rather than by the input.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. } | Error::NashNotConverged { .. } | Error::ThresholdNotReached { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
