//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural validation failed; the report lists every violation found.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A node id outside `0..=N` (or the slack where it is not allowed).
    #[error("unknown node id {0}")]
    UnknownNode(usize),

    /// The slack bus has no path to itself.
    #[error("slack has no path")]
    SlackHasNoPath,

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The power-flow sweep did not reach the requested tolerance.
    #[error("power flow did not converge: residual {residual:.3e} after {iterations} sweeps")]
    NonConvergence { residual: f64, iterations: usize },

    /// A squared voltage magnitude dropped to zero or below during a sweep.
    #[error("voltage collapse at node {node} (v^2 = {v_squared:.3e})")]
    VoltageCollapse { node: usize, v_squared: f64 },

    /// The primal-dual iteration's residual grew 10x over a 50-iteration
    /// window; the step size is too large for the instance.
    #[error(
        "divergence detected at iteration {iteration}: residual {residual:.3e} \
         grew {factor:.1}x over the last {window} iterations"
    )]
    Divergence {
        iteration: usize,
        residual: f64,
        factor: f64,
        window: usize,
    },

    /// An iterative routine hit its hard iteration cap.
    #[error("iteration cap {cap} exceeded (residual {residual:.3e})")]
    IterationCap { cap: usize, residual: f64 },

    /// An agent view was constructed with, or asked for, data outside its
    /// scope.
    #[error("information-hiding violation: {0}")]
    InfoHiding(String),

    /// A text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A generator or partition request cannot be satisfied.
    #[error("infeasible spec: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
