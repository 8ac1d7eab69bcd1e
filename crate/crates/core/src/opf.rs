//! Voltage-constrained dispatch problem and its regularized saddle operator.
//!
//! The problem minimizes separable quadratic device costs plus a convex
//! head-power cost subject to box-constrained injections and two-sided
//! voltage limits. Voltage limits are dualized; a `-phi/2 ||mu||^2` term
//! makes the Lagrangian strongly concave in the duals so the projected
//! primal-dual gradient iteration contracts toward a unique saddle point.
//! [`certify_stepsize`] bounds the admissible constant step from the strong
//! monotonicity and Lipschitz constants of the saddle operator.

use ndarray::Array1;

use crate::feeder::{feeder_head_power, voltages, SensitivityPair};
use crate::linalg::{matvec, norm_inf, FlopCounter};
use crate::{Error, Result};

/// Axis-aligned feasible box for one device's `(p, q)` injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxSet {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl BoxSet {
    pub fn new(p_min: f64, p_max: f64, q_min: f64, q_max: f64) -> Result<Self> {
        if p_min > p_max || q_min > q_max {
            return Err(Error::Infeasible(format!(
                "empty box [{p_min},{p_max}]x[{q_min},{q_max}]"
            )));
        }
        Ok(Self {
            p_min,
            p_max,
            q_min,
            q_max,
        })
    }

    /// Singleton box pinning the injection to one point.
    pub fn fixed(p: f64, q: f64) -> Self {
        Self {
            p_min: p,
            p_max: p,
            q_min: q,
            q_max: q,
        }
    }

    pub fn contains(&self, p: f64, q: f64) -> bool {
        self.p_min <= p && p <= self.p_max && self.q_min <= q && q <= self.q_max
    }
}

/// Cost and feasible range of the dispatchable device at one node.
///
/// The cost is `cp (p - p_target)^2 + cq (q - q_target)^2` with `cp, cq > 0`,
/// so every device block is strongly convex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceSpec {
    pub cp: f64,
    pub cq: f64,
    pub p_target: f64,
    pub q_target: f64,
    pub bounds: BoxSet,
}

impl DeviceSpec {
    pub fn new(cp: f64, cq: f64, p_target: f64, q_target: f64, bounds: BoxSet) -> Result<Self> {
        if !(cp > 0.0) || !(cq > 0.0) {
            return Err(Error::Infeasible(format!(
                "device cost weights must be positive (cp={cp}, cq={cq})"
            )));
        }
        Ok(Self {
            cp,
            cq,
            p_target,
            q_target,
            bounds,
        })
    }

    /// A node without a dispatchable device: injection pinned at `(p, q)`.
    pub fn fixed(p: f64, q: f64) -> Self {
        Self {
            cp: 1.0,
            cq: 1.0,
            p_target: p,
            q_target: q,
            bounds: BoxSet::fixed(p, q),
        }
    }

    pub fn cost(&self, p: f64, q: f64) -> f64 {
        let dp = p - self.p_target;
        let dq = q - self.q_target;
        self.cp * dp * dp + self.cq * dq * dq
    }
}

/// The full dispatch problem over one feeder.
#[derive(Debug, Clone)]
pub struct OpfProblem {
    devices: Vec<DeviceSpec>,
    v_lo: Array1<f64>,
    v_hi: Array1<f64>,
    /// Head-cost weight in `alpha (P0 - p0_hat)^2`; zero disables the term.
    alpha: f64,
    p0_hat: f64,
    /// Total uncontrollable inelastic load (positive = consumption).
    p_inelastic: f64,
    /// Dual regularization weight, strictly positive.
    phi: f64,
}

impl OpfProblem {
    pub fn new(
        devices: Vec<DeviceSpec>,
        v_lo: Array1<f64>,
        v_hi: Array1<f64>,
        alpha: f64,
        p0_hat: f64,
        p_inelastic: f64,
        phi: f64,
    ) -> Result<Self> {
        let n = devices.len();
        for len in [v_lo.len(), v_hi.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        if v_lo.iter().zip(v_hi.iter()).any(|(lo, hi)| lo >= hi) {
            return Err(Error::Infeasible(
                "voltage bounds must satisfy v_lo < v_hi".into(),
            ));
        }
        if !(phi > 0.0) {
            return Err(Error::Infeasible(format!(
                "phi must be positive, got {phi}"
            )));
        }
        if alpha < 0.0 {
            return Err(Error::Infeasible(format!(
                "alpha must be nonnegative, got {alpha}"
            )));
        }
        Ok(Self {
            devices,
            v_lo,
            v_hi,
            alpha,
            p0_hat,
            p_inelastic,
            phi,
        })
    }

    pub fn node_count(&self) -> usize {
        self.devices.len()
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn device(&self, node: usize) -> &DeviceSpec {
        &self.devices[node - 1]
    }

    pub fn v_lo(&self) -> &Array1<f64> {
        &self.v_lo
    }

    pub fn v_hi(&self) -> &Array1<f64> {
        &self.v_hi
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn p0_hat(&self) -> f64 {
        self.p0_hat
    }

    pub fn p_inelastic(&self) -> f64 {
        self.p_inelastic
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    /// Derivative of the head cost at the given head power.
    pub fn head_cost_derivative(&self, p0: f64) -> f64 {
        2.0 * self.alpha * (p0 - self.p0_hat)
    }

    pub fn head_cost(&self, p0: f64) -> f64 {
        let d = p0 - self.p0_hat;
        self.alpha * d * d
    }

    /// Objective `sum C_i + C_0(P0)` at the given injections.
    pub fn objective(&self, p: &Array1<f64>, q: &Array1<f64>) -> f64 {
        let mut total = 0.0;
        for (i, dev) in self.devices.iter().enumerate() {
            total += dev.cost(p[i], q[i]);
        }
        total + self.head_cost(feeder_head_power(p, self.p_inelastic))
    }

    /// Device targets clamped into their boxes; the solvers start here.
    pub fn initial_dispatch(&self) -> (Array1<f64>, Array1<f64>) {
        let n = self.node_count();
        let mut p = Array1::zeros(n);
        let mut q = Array1::zeros(n);
        for (i, dev) in self.devices.iter().enumerate() {
            let (pi, qi) = project_box((dev.p_target, dev.q_target), &dev.bounds);
            p[i] = pi;
            q[i] = qi;
        }
        (p, q)
    }
}

/// Primal-dual iterate with derived quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub t: usize,
    pub p: Array1<f64>,
    pub q: Array1<f64>,
    pub mu_lo: Array1<f64>,
    pub mu_hi: Array1<f64>,
    /// Voltages used for the next dual update (linear or measured).
    pub v: Array1<f64>,
    pub p0: f64,
}

impl IterateState {
    pub fn stacked(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(4 * self.p.len());
        z.extend(self.p.iter());
        z.extend(self.q.iter());
        z.extend(self.mu_lo.iter());
        z.extend(self.mu_hi.iter());
        z
    }

    /// True when boxes hold the primals and duals are nonnegative.
    pub fn is_feasible(&self, prob: &OpfProblem) -> bool {
        let boxes_ok = prob
            .devices()
            .iter()
            .enumerate()
            .all(|(i, d)| d.bounds.contains(self.p[i], self.q[i]));
        boxes_ok && self.mu_lo.iter().all(|&m| m >= 0.0) && self.mu_hi.iter().all(|&m| m >= 0.0)
    }
}

/// Step-size certificate from the operator's monotonicity and Lipschitz
/// constants: any constant step below `2M/L^2` contracts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceCertificate {
    /// Strong-monotonicity modulus of the saddle operator.
    pub m: f64,
    /// Lipschitz constant (spectral norm of the operator Jacobian, estimated
    /// by power iteration to relative tolerance 1e-13).
    pub l: f64,
}

impl ConvergenceCertificate {
    /// Upper limit of the certified step range.
    pub fn step_bound(&self) -> f64 {
        2.0 * self.m / (self.l * self.l)
    }

    /// Default certified step: 90% of the bound.
    pub fn suggested_epsilon(&self) -> f64 {
        0.9 * self.step_bound()
    }

    /// Squared per-step contraction estimate `1 + eps^2 L^2 - 2 eps M`;
    /// below one for any step inside the certified range.
    pub fn contraction_factor(&self, epsilon: f64) -> f64 {
        1.0 + epsilon * epsilon * self.l * self.l - 2.0 * epsilon * self.m
    }
}

/// Regularized Lagrangian value at the iterate, with voltages evaluated
/// through the linear model (the Lagrangian is a function of `(p, q, mu)`).
pub fn lagrangian_value(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    state: &IterateState,
) -> Result<f64> {
    let v = voltages(sens, &state.p, &state.q)?;
    let mut value = prob.objective(&state.p, &state.q);
    let mut mu_sq = 0.0;
    for i in 0..prob.node_count() {
        value += state.mu_lo[i] * (prob.v_lo[i] - v[i]);
        value += state.mu_hi[i] * (v[i] - prob.v_hi[i]);
        mu_sq += state.mu_lo[i] * state.mu_lo[i] + state.mu_hi[i] * state.mu_hi[i];
    }
    Ok(value - 0.5 * prob.phi() * mu_sq)
}

/// Gradients of the regularized Lagrangian in the primal blocks.
///
/// `grad_p[i] = dC_i/dp_i - C_0'(P0) + [R (mu_hi - mu_lo)]_i` — the head
/// cost enters with a minus sign because `dP0/dp_i = -1`.
pub fn primal_gradient(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    state: &IterateState,
) -> (Array1<f64>, Array1<f64>) {
    let mut flops = FlopCounter::new();
    let diff = &state.mu_hi - &state.mu_lo;
    let rd = matvec(&sens.r, &diff, &mut flops);
    let xd = matvec(&sens.x, &diff, &mut flops);
    let c0p = prob.head_cost_derivative(feeder_head_power(&state.p, prob.p_inelastic()));
    let n = prob.node_count();
    let mut gp = Array1::zeros(n);
    let mut gq = Array1::zeros(n);
    for (i, dev) in prob.devices().iter().enumerate() {
        gp[i] = 2.0 * dev.cp * (state.p[i] - dev.p_target) - c0p + rd[i];
        gq[i] = 2.0 * dev.cq * (state.q[i] - dev.q_target) + xd[i];
    }
    (gp, gq)
}

/// Ascent directions for the duals: `(v_lo - v - phi mu_lo,
/// v - v_hi - phi mu_hi)`, using the voltages stored in the state.
pub fn dual_gradient(prob: &OpfProblem, state: &IterateState) -> (Array1<f64>, Array1<f64>) {
    let n = prob.node_count();
    let mut g_lo = Array1::zeros(n);
    let mut g_hi = Array1::zeros(n);
    for i in 0..n {
        g_lo[i] = prob.v_lo[i] - state.v[i] - prob.phi() * state.mu_lo[i];
        g_hi[i] = state.v[i] - prob.v_hi[i] - prob.phi() * state.mu_hi[i];
    }
    (g_lo, g_hi)
}

/// Euclidean projection onto an axis-aligned box is the componentwise clamp.
pub fn project_box(value: (f64, f64), bounds: &BoxSet) -> (f64, f64) {
    (
        value.0.clamp(bounds.p_min, bounds.p_max),
        value.1.clamp(bounds.q_min, bounds.q_max),
    )
}

/// Projection onto the nonnegative orthant.
pub fn project_nonneg(v: &Array1<f64>) -> Array1<f64> {
    v.mapv(|x| x.max(0.0))
}

/// The saddle operator `T(z) = [grad_y L; -grad_mu L]` at
/// `z = (p, q, mu_lo, mu_hi)`, with voltages through the linear model.
pub fn saddle_operator(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    p: &Array1<f64>,
    q: &Array1<f64>,
    mu_lo: &Array1<f64>,
    mu_hi: &Array1<f64>,
) -> Result<(Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>)> {
    let state = IterateState {
        t: 0,
        v: voltages(sens, p, q)?,
        p0: feeder_head_power(p, prob.p_inelastic()),
        p: p.clone(),
        q: q.clone(),
        mu_lo: mu_lo.clone(),
        mu_hi: mu_hi.clone(),
    };
    let (tp, tq) = primal_gradient(prob, sens, &state);
    let (g_lo, g_hi) = dual_gradient(prob, &state);
    Ok((tp, tq, -g_lo, -g_hi))
}

fn min_cost_curvature(prob: &OpfProblem) -> f64 {
    prob.devices()
        .iter()
        .map(|d| d.cp.min(d.cq))
        .fold(f64::INFINITY, f64::min)
}

/// Applies the constant Jacobian of the saddle operator to a stacked
/// direction; used by the power iteration in [`certify_stepsize`].
fn apply_jacobian(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    z: &[f64],
    transpose: bool,
) -> Vec<f64> {
    let n = prob.node_count();
    let dp = Array1::from(z[0..n].to_vec());
    let dq = Array1::from(z[n..2 * n].to_vec());
    let dl = Array1::from(z[2 * n..3 * n].to_vec());
    let dh = Array1::from(z[3 * n..4 * n].to_vec());
    let mut flops = FlopCounter::new();

    // R and X are symmetric, so transposing only flips the sign pattern of
    // the skew off-diagonal blocks.
    let dual_diff = if transpose { &dl - &dh } else { &dh - &dl };
    let r_dual = matvec(&sens.r, &dual_diff, &mut flops);
    let x_dual = matvec(&sens.x, &dual_diff, &mut flops);
    let primal_sign = if transpose { -1.0 } else { 1.0 };
    let rp = matvec(&sens.r, &dp, &mut flops);
    let xq = matvec(&sens.x, &dq, &mut flops);

    let sum_dp: f64 = dp.iter().sum();
    let mut out = vec![0.0; 4 * n];
    for (i, dev) in prob.devices().iter().enumerate() {
        out[i] = 2.0 * dev.cp * dp[i] + 2.0 * prob.alpha() * sum_dp + r_dual[i];
        out[n + i] = 2.0 * dev.cq * dq[i] + x_dual[i];
        out[2 * n + i] = primal_sign * (rp[i] + xq[i]) + prob.phi() * dl[i];
        out[3 * n + i] = -primal_sign * (rp[i] + xq[i]) + prob.phi() * dh[i];
    }
    out
}

/// Largest eigenvalue of a small symmetric matrix by cyclic Jacobi sweeps.
fn jacobi_max_eigenvalue(mut a: Vec<Vec<f64>>) -> f64 {
    let k = a.len();
    if k == 1 {
        return a[0][0];
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..k {
            for q in (p + 1)..k {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-30 {
            break;
        }
        for p in 0..k {
            for q in (p + 1)..k {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..k {
                    let aip = a[i][p];
                    let aiq = a[i][q];
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..k {
                    let api = a[p][i];
                    let aqi = a[q][i];
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
            }
        }
    }
    (0..k).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Certifies a constant step size from the operator constants.
///
/// `M` comes from the block-diagonal part of the Jacobian (the skew coupling
/// contributes nothing to monotonicity): the smaller of the weakest device
/// curvature `2 min(cp, cq)` and the dual regularization `phi`. The
/// head-cost term adds a positive-semidefinite rank-one block, so it is
/// reflected in `L` but claims no credit in `M`.
///
/// `L` is the spectral norm of the operator Jacobian, computed by block
/// power iteration on `J^T J`: a six-column subspace keeps clustered or
/// symmetric-feeder-degenerate top singular values from stalling the
/// scalar recurrence.
pub fn certify_stepsize(
    prob: &OpfProblem,
    sens: &SensitivityPair,
) -> Result<ConvergenceCertificate> {
    let n = prob.node_count();
    if sens.node_count() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sens.node_count(),
        });
    }
    let m = (2.0 * min_cost_curvature(prob)).min(prob.phi());

    let dim = 4 * n;
    let k = 6.min(dim);
    // deterministic start block, orthonormalized below
    let mut basis: Vec<Vec<f64>> = (0..k)
        .map(|col| {
            (0..dim)
                .map(|i| 1.0 + (((i + 31 * col) * 2654435761) % 97) as f64 / 97.0)
                .collect()
        })
        .collect();
    let orthonormalize = |basis: &mut Vec<Vec<f64>>| {
        for j in 0..basis.len() {
            for prev in 0..j {
                let dot: f64 = basis[j].iter().zip(&basis[prev]).map(|(a, b)| a * b).sum();
                let prev_col = basis[prev].clone();
                basis[j]
                    .iter_mut()
                    .zip(&prev_col)
                    .for_each(|(v, p)| *v -= dot * p);
            }
            let norm = crate::linalg::norm2(&basis[j]);
            if norm > 0.0 {
                basis[j].iter_mut().for_each(|v| *v /= norm);
            }
        }
    };
    orthonormalize(&mut basis);

    let mut lambda = 0.0_f64;
    for _ in 0..5000 {
        // W = J^T J Z, one column at a time
        let images: Vec<Vec<f64>> = basis
            .iter()
            .map(|z| {
                let jz = apply_jacobian(prob, sens, z, false);
                apply_jacobian(prob, sens, &jz, true)
            })
            .collect();
        // Rayleigh-Ritz on the current orthonormal basis
        let mut gram = vec![vec![0.0; k]; k];
        for a in 0..k {
            for b in a..k {
                let dot: f64 = basis[a].iter().zip(&images[b]).map(|(x, y)| x * y).sum();
                gram[a][b] = dot;
                gram[b][a] = dot;
            }
        }
        let new_lambda = jacobi_max_eigenvalue(gram);
        let settled = (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs().max(1e-300);
        lambda = new_lambda;
        if settled {
            break;
        }
        basis = images;
        orthonormalize(&mut basis);
    }
    let l = lambda.max(0.0).sqrt();

    if !(m > 0.0) || l < m {
        return Err(Error::Infeasible(format!(
            "certificate out of range: M={m:.3e}, L={l:.3e}"
        )));
    }
    Ok(ConvergenceCertificate { m, l })
}

/// Iteration cap for [`saddle_point_oracle`].
pub const ORACLE_ITERATION_CAP: usize = 20_000_000;

/// Reference saddle point, computed by running the projected primal-dual
/// iteration on the dense path with the certified step until the
/// fixed-point residual drops below `tol * epsilon`.
///
/// The update formulas are written out inline so this stays an independent
/// check on the solver drivers.
pub fn saddle_point_oracle(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    tol: f64,
) -> Result<IterateState> {
    let cert = certify_stepsize(prob, sens)?;
    let eps = cert.suggested_epsilon();
    let phi = prob.phi();
    let n = prob.node_count();

    let (mut p, mut q) = prob.initial_dispatch();
    let mut mu_lo = Array1::<f64>::zeros(n);
    let mut mu_hi = Array1::<f64>::zeros(n);
    let mut flops = FlopCounter::new();
    let mut v = voltages(sens, &p, &q)?;

    let mut residual = f64::INFINITY;
    for t in 0..ORACLE_ITERATION_CAP {
        let p0 = feeder_head_power(&p, prob.p_inelastic());
        let c0p = prob.head_cost_derivative(p0);
        let diff = &mu_hi - &mu_lo;
        let rd = matvec(&sens.r, &diff, &mut flops);
        let xd = matvec(&sens.x, &diff, &mut flops);

        let mut max_step = 0.0f64;
        let mut p_new = Array1::zeros(n);
        let mut q_new = Array1::zeros(n);
        let mut lo_new = Array1::zeros(n);
        let mut hi_new = Array1::zeros(n);
        for (i, dev) in prob.devices().iter().enumerate() {
            let gp = 2.0 * dev.cp * (p[i] - dev.p_target) - c0p + rd[i];
            let gq = 2.0 * dev.cq * (q[i] - dev.q_target) + xd[i];
            let (pi, qi) = project_box((p[i] - eps * gp, q[i] - eps * gq), &dev.bounds);
            let li = (mu_lo[i] + eps * (prob.v_lo[i] - v[i] - phi * mu_lo[i])).max(0.0);
            let hi = (mu_hi[i] + eps * (v[i] - prob.v_hi[i] - phi * mu_hi[i])).max(0.0);
            max_step = max_step
                .max((pi - p[i]).abs())
                .max((qi - q[i]).abs())
                .max((li - mu_lo[i]).abs())
                .max((hi - mu_hi[i]).abs());
            p_new[i] = pi;
            q_new[i] = qi;
            lo_new[i] = li;
            hi_new[i] = hi;
        }
        p = p_new;
        q = q_new;
        mu_lo = lo_new;
        mu_hi = hi_new;
        v = voltages(sens, &p, &q)?;
        residual = max_step;
        if residual <= tol * eps {
            return Ok(IterateState {
                t: t + 1,
                p0: feeder_head_power(&p, prob.p_inelastic()),
                p,
                q,
                mu_lo,
                mu_hi,
                v,
            });
        }
    }
    Err(Error::IterationCap {
        cap: ORACLE_ITERATION_CAP,
        residual,
    })
}

/// Projected fixed-point residual at `z` for step `eps`:
/// `|| z - proj(z - eps T(z)) ||_inf / eps`, a scale-free stationarity
/// measure that vanishes exactly at the saddle point.
pub fn projected_gradient_norm(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    state: &IterateState,
    eps: f64,
) -> Result<f64> {
    let (tp, tq, tl, th) =
        saddle_operator(prob, sens, &state.p, &state.q, &state.mu_lo, &state.mu_hi)?;
    let n = prob.node_count();
    let mut worst = vec![0.0; 4 * n];
    for (i, dev) in prob.devices().iter().enumerate() {
        let (pi, qi) = project_box(
            (state.p[i] - eps * tp[i], state.q[i] - eps * tq[i]),
            &dev.bounds,
        );
        // dual ascent moves along -T for the stacked operator
        let li = (state.mu_lo[i] - eps * tl[i]).max(0.0);
        let hi = (state.mu_hi[i] - eps * th[i]).max(0.0);
        worst[i] = pi - state.p[i];
        worst[n + i] = qi - state.q[i];
        worst[2 * n + i] = li - state.mu_lo[i];
        worst[3 * n + i] = hi - state.mu_hi[i];
    }
    Ok(norm_inf(&worst) / eps)
}
