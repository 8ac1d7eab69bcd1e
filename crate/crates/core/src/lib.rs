//! Voltage-regulation optimal power flow on radial distribution feeders.
//!
//! The crate models a rooted radial feeder, builds the voltage-to-injection
//! sensitivity matrices of the linearized branch-flow (LinDistFlow) model,
//! and solves a voltage-constrained dispatch problem with a regularized
//! primal-dual gradient iteration. Two interchangeable drivers are provided:
//!
//! * [`central::run_central`] — a coordinator that owns the full sensitivity
//!   matrices and performs dense matrix-vector products every iteration.
//! * [`hierarchy::run_hierarchical`] — a message-passing simulation of the
//!   same iteration over a two-level coordinator hierarchy, where each
//!   regional coordinator sees only its own subtree and the central
//!   coordinator sees only the reduced network. The iterates match the
//!   central driver to floating-point reordering error while doing far
//!   fewer coupling multiply-adds.
//!
//! A nonlinear DistFlow solver ([`physics`]) stands in for the physical grid
//! when closed-loop voltage measurements are requested, and [`harness`]
//! provides file formats, a synthetic feeder generator, and scenario presets
//! for the command-line driver.

pub mod central;
pub mod error;
pub mod feeder;
pub mod harness;
pub mod hierarchy;
pub mod linalg;
pub mod opf;
pub mod physics;
pub mod validation;

pub use central::{run_central, RunTrace, SolveOptions, StopCriterion, TraceRow, VoltageSource};
pub use error::Error;
pub use feeder::{
    build_sensitivity, feeder_head_power, path_to_root, validate_tree, voltages, FeederModel, Line,
    SensitivityPair,
};
pub use hierarchy::{
    build_agent_views, build_reduced, common_path_collapse, coupling_via_hierarchy,
    run_hierarchical, validate_partition, AgentViews, CcView, NodeView, Partition, RcView,
    ReducedNetwork, RoundMessageLog,
};
pub use opf::{
    certify_stepsize, dual_gradient, lagrangian_value, primal_gradient, project_box,
    project_nonneg, saddle_operator, saddle_point_oracle, BoxSet, ConvergenceCertificate,
    DeviceSpec, IterateState, OpfProblem,
};
pub use physics::{linearization_error, solve_distflow, PowerFlowSolution};
pub use validation::ValidationReport;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
