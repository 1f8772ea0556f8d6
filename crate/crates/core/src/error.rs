use thiserror::Error;

/// Crate-wide error type. Most numerical probes report findings in their
/// result structs instead of failing; errors mean a precondition is broken.
#[derive(Debug, Error)]
pub enum PhaseError {
    #[error("gradient degenerate within {q_min:.1e} of well {well} (alpha < 2)")]
    DegenerateGradient { well: usize, q_min: f64 },

    #[error("operation requires alpha = 2, potential has alpha = {alpha}")]
    UnsupportedAlpha { alpha: f64 },

    #[error("power profile needs tau = max(alpha, 1) < 2, got tau = {tau}")]
    UnsupportedTau { tau: f64 },

    #[error("hypothesis {name} violated at u = {point:?}: {detail}")]
    HypothesisViolated {
        name: &'static str,
        point: Vec<f64>,
        detail: String,
    },

    #[error("descent did not converge: residual {residual:.3e} after {iters} iterations")]
    NoConvergence { residual: f64, iters: usize },

    #[error("rescaled sample point {point:?} leaves the source grid")]
    OutOfDomain { point: Vec<f64> },

    #[error("profile check failed at node {node:?}: {detail}")]
    CheckFailed { node: Vec<usize>, detail: String },

    #[error("log-log window has {usable} usable points, need at least 4")]
    DegenerateWindow { usable: usize },

    #[error("no decay window: {0}")]
    NoDecayWindow(String),

    #[error("connection truncation too short: {0}")]
    TruncationTooShort(String),

    #[error("curve is not admissible: {0}")]
    NonAdmissible(String),

    #[error("operator is not hyperbolic: eta = {eta:.3e}")]
    NotHyperbolic { eta: f64 },

    #[error("cylinder grid does not match connection truncation: {0}")]
    TruncationMismatch(String),

    #[error("level set at gamma = {gamma} is empty")]
    EmptyLevelSet { gamma: f64 },

    #[error("grid: {0}")]
    Grid(String),

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhaseError>;
