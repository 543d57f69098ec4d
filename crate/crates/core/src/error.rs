//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("negative coefficient at slot {slot}: {value}")]
    NegativeCoefficient { slot: usize, value: f64 },

    #[error("measure mass {mass} deviates from 1 beyond tolerance {tol}")]
    MassNotNormalized { mass: f64, tol: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("equal-mass grid: requested {requested} cells but only {available} fine cells carry positive mass")]
    TooFewMassCells { requested: usize, available: usize },

    #[error("degenerate aggregates: X={x}, Y={y}")]
    DegenerateAggregates { x: f64, y: f64 },

    #[error("nonpositive production input: X={x}, Y={y}")]
    NonpositiveProductionInput { x: f64, y: f64 },

    #[error("utility undefined for consumption {0}")]
    NonpositiveConsumption(f64),

    #[error("infinite Hamiltonian at p={0}; apply the gradient floor before calling")]
    InfiniteHamiltonian(f64),

    #[error("infeasible state: x={x} admits no nonnegative consumption (budget {budget})")]
    InfeasibleState { x: f64, budget: f64 },

    #[error("savings policy returned a non-finite value at x={x}, level {level}")]
    NanSavings { x: f64, level: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("training diverged ({context}): mse {mse}")]
    Divergence { mse: f64, context: String },

    #[error("no convergence after {iterations} iterations ({context})")]
    NonConvergence { iterations: usize, context: String },

    #[error("bisection bracket [{lo}, {hi}] has no sign change")]
    BracketSignChange { lo: f64, hi: f64 },

    #[error("export error: {0}")]
    Export(String),

    #[error("run directory error: {0}")]
    RunDir(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
