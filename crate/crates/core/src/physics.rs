//! Nonlinear DistFlow solver via backward/forward sweeps.
//!
//! Works in squared voltage magnitudes, so no small-angle or `v ~ 1`
//! approximation is made: the backward pass aggregates branch flows with
//! `r*l` / `x*l` loss terms, the forward pass propagates
//! `v_j^2 = v_i^2 - 2(r P + x Q) + (r^2 + x^2) l`, and the branch current
//! update closes the loop with `l = (P^2 + Q^2) / v_i^2`. This stands in
//! for the physical grid when solvers run with measured (nonlinear)
//! voltages, and it quantifies the linearization error of the sensitivity
//! model.

use ndarray::Array1;

use crate::feeder::{build_sensitivity, validate_tree, voltages, FeederModel};
use crate::{Error, Result};

/// Default sweep tolerance on the max voltage-magnitude change, p.u.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default sweep cap.
pub const DEFAULT_MAX_ITER: usize = 100;

/// Converged operating point of the nonlinear branch-flow equations.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltage magnitudes including the slack at index 0, p.u.
    pub v: Array1<f64>,
    /// Sending-end active flow per line, in `FeederModel::lines` order.
    pub p_flow: Vec<f64>,
    /// Sending-end reactive flow per line.
    pub q_flow: Vec<f64>,
    /// Squared branch current per line.
    pub ell: Vec<f64>,
    pub iterations: usize,
    /// Max voltage-magnitude change over the final sweep.
    pub residual: f64,
}

impl PowerFlowSolution {
    /// Non-slack voltages only, aligned with sensitivity-vector indexing.
    pub fn v_nonslack(&self) -> Array1<f64> {
        Array1::from(self.v.as_slice().unwrap()[1..].to_vec())
    }

    /// Total series losses `sum(r * ell)`.
    pub fn total_loss(&self, model: &FeederModel) -> f64 {
        model
            .lines()
            .iter()
            .zip(&self.ell)
            .map(|(line, ell)| line.r * ell)
            .sum()
    }

    /// Active power drawn from the slack bus (sum of flows on slack lines).
    pub fn head_power(&self, model: &FeederModel) -> f64 {
        model
            .lines()
            .iter()
            .zip(&self.p_flow)
            .filter(|(line, _)| line.parent == 0)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Solves the DistFlow equations for dispatched injections `p`, `q` added on
/// top of the model's fixed background `p0`, `q0`.
///
/// Net injection at node i is `p0[i] + p[i]`, matching the convention of the
/// linear map where the background sits inside `v_tilde`; the two voltage
/// routes are therefore directly comparable at the same arguments.
pub fn solve_distflow(
    model: &FeederModel,
    p: &Array1<f64>,
    q: &Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution> {
    validate_tree(model).into_result()?;
    let n = model.node_count();
    for len in [p.len(), q.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if !(tol > 0.0) {
        return Err(Error::Infeasible(format!(
            "tolerance must be positive, got {tol}"
        )));
    }

    let lines = model.lines();
    let nl = lines.len();
    // line index feeding each node, and child line indices per node
    let mut line_into = vec![usize::MAX; n + 1];
    for (idx, line) in lines.iter().enumerate() {
        line_into[line.child] = idx;
    }
    let order = model.topological_order();

    let p_net: Vec<f64> = (0..n).map(|i| model.p0()[i] + p[i]).collect();
    let q_net: Vec<f64> = (0..n).map(|i| model.q0()[i] + q[i]).collect();

    // Flat start: nominal voltage everywhere, no losses.
    let w0 = model.v0() * model.v0();
    let mut w = vec![w0; n + 1];
    let mut p_flow = vec![0.0; nl];
    let mut q_flow = vec![0.0; nl];
    let mut ell = vec![0.0; nl];

    let mut residual = f64::INFINITY;
    for sweep in 1..=max_iter {
        // Backward: child lines first, loss terms from the previous ell.
        for &node in order.iter().rev() {
            let li = line_into[node];
            let mut ps = -p_net[node - 1] + lines[li].r * ell[li];
            let mut qs = -q_net[node - 1] + lines[li].x * ell[li];
            for &c in model.children_of(node) {
                ps += p_flow[line_into[c]];
                qs += q_flow[line_into[c]];
            }
            p_flow[li] = ps;
            q_flow[li] = qs;
        }

        // Forward: propagate squared voltages from the slack.
        let mut max_dv = 0.0f64;
        for &node in &order {
            let li = line_into[node];
            let line = &lines[li];
            let wi = w[line.parent];
            let wj = wi - 2.0 * (line.r * p_flow[li] + line.x * q_flow[li])
                + (line.r * line.r + line.x * line.x) * ell[li];
            if wj <= 0.0 {
                return Err(Error::VoltageCollapse {
                    node,
                    v_squared: wj,
                });
            }
            max_dv = max_dv.max((wj.sqrt() - w[node].sqrt()).abs());
            w[node] = wj;
        }

        // Current update against the fresh parent voltages.
        for (li, line) in lines.iter().enumerate() {
            let wi = w[line.parent];
            ell[li] = (p_flow[li] * p_flow[li] + q_flow[li] * q_flow[li]) / wi;
        }

        residual = max_dv;
        if residual <= tol {
            return Ok(PowerFlowSolution {
                v: Array1::from(w.iter().map(|wi| wi.sqrt()).collect::<Vec<_>>()),
                p_flow,
                q_flow,
                ell,
                iterations: sweep,
                residual,
            });
        }
    }

    Err(Error::NonConvergence {
        residual,
        iterations: max_iter,
    })
}

/// Per-node gap `v_nonlinear - v_linear` between the DistFlow solution and
/// the sensitivity-model voltages at the same dispatched injections.
pub fn linearization_error(
    model: &FeederModel,
    p: &Array1<f64>,
    q: &Array1<f64>,
) -> Result<Array1<f64>> {
    let sol = solve_distflow(model, p, q, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let sens = build_sensitivity(model)?;
    let v_lin = voltages(&sens, p, q)?;
    Ok(&sol.v_nonslack() - &v_lin)
}
