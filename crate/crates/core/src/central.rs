//! Centrally coordinated primal-dual iteration.
//!
//! One coordinator holds the full sensitivity matrices and, every iteration,
//! multiplies them against the stacked dual difference to produce each
//! node's coupling term. All four variable blocks step simultaneously from
//! time-`t` values, projections keep primals in their boxes and duals
//! nonnegative, and the loop stops on a fixed-point or head-power residual.
//! This driver is the correctness baseline the hierarchical implementation
//! is measured against, including its per-iteration coupling flop count of
//! exactly `4 N^2`.

use ndarray::Array1;
use std::time::Instant;

use crate::feeder::{feeder_head_power, voltages, FeederModel, SensitivityPair};
use crate::linalg::{matvec, FlopCounter};
use crate::opf::{project_box, ConvergenceCertificate, IterateState, OpfProblem};
use crate::physics::solve_distflow;
use crate::{Error, Result};

/// Where dual updates get their voltages: the linear sensitivity model or a
/// nonlinear power-flow solve standing in for grid measurements.
#[derive(Debug, Clone, Copy)]
pub enum VoltageSource<'a> {
    Linear(&'a SensitivityPair),
    Nonlinear {
        model: &'a FeederModel,
        tol: f64,
        max_iter: usize,
    },
}

impl<'a> VoltageSource<'a> {
    /// Nonlinear source with the default sweep settings.
    pub fn nonlinear(model: &'a FeederModel) -> Self {
        Self::Nonlinear {
            model,
            tol: crate::physics::DEFAULT_TOL,
            max_iter: crate::physics::DEFAULT_MAX_ITER,
        }
    }

    pub fn voltages(&self, p: &Array1<f64>, q: &Array1<f64>) -> Result<Array1<f64>> {
        match self {
            Self::Linear(sens) => voltages(sens, p, q),
            Self::Nonlinear {
                model,
                tol,
                max_iter,
            } => Ok(solve_distflow(model, p, q, *tol, *max_iter)?.v_nonslack()),
        }
    }
}

/// Which residual ends the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StopCriterion {
    /// `|| z(t+1) - z(t) ||_inf <= sigma`.
    #[default]
    FixedPoint,
    /// `| P0(t+1) - P0(t) | < sigma`, the substation-side rule. Engages
    /// only after [`HEAD_POWER_WARMUP`] iterations: from a cold start the
    /// duals are zero and the first step cannot move the head power, which
    /// would satisfy any positive tolerance vacuously.
    HeadPower,
}

/// Iterations before the head-power stopping rule may fire.
pub const HEAD_POWER_WARMUP: usize = 10;

/// Iteration parameters shared by both solver drivers.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub epsilon: f64,
    pub sigma: f64,
    pub max_iter: usize,
    pub stop: StopCriterion,
    /// Keep a stacked copy of every iterate (memory: 4N per iteration).
    pub record_iterates: bool,
    /// Hierarchical driver only: keep per-message records in addition to
    /// per-round totals.
    pub detailed_messages: bool,
}

impl SolveOptions {
    pub fn new(epsilon: f64, sigma: f64, max_iter: usize) -> Self {
        Self {
            epsilon,
            sigma,
            max_iter,
            stop: StopCriterion::FixedPoint,
            record_iterates: false,
            detailed_messages: false,
        }
    }
}

/// One iteration record.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    /// `|| z(t) - z(t-1) ||_2`; infinity on the initial row.
    pub residual: f64,
    pub objective: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub p0: f64,
    pub coupling_flops: u64,
    pub messages: u64,
    pub wall_secs: f64,
}

/// Full run record: per-iteration rows plus the outcome summary.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub iterations: usize,
    /// Filled in by callers that derived the step from a certificate.
    pub certificate: Option<ConvergenceCertificate>,
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl RunTrace {
    pub fn total_coupling_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.coupling_flops).sum()
    }
}

/// Residual window for the divergence detector.
pub const DIVERGENCE_WINDOW: usize = 50;
/// Growth factor over the window that triggers the divergence abort.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

pub(crate) struct DivergenceDetector {
    history: Vec<f64>,
    floor: f64,
}

impl DivergenceDetector {
    pub(crate) fn new(sigma: f64) -> Self {
        Self {
            history: Vec::new(),
            floor: sigma.max(1e-13),
        }
    }

    /// Records the residual for iteration `t`; errors when it grew tenfold
    /// over the window.
    pub(crate) fn check(&mut self, t: usize, residual: f64) -> Result<()> {
        self.history.push(residual);
        if self.history.len() > DIVERGENCE_WINDOW {
            let old = self.history[self.history.len() - 1 - DIVERGENCE_WINDOW];
            if old > 0.0 && residual > self.floor && residual >= DIVERGENCE_FACTOR * old {
                return Err(Error::Divergence {
                    iteration: t,
                    residual,
                    factor: residual / old,
                    window: DIVERGENCE_WINDOW,
                });
            }
        }
        Ok(())
    }
}

/// Runs the centrally coordinated iteration to the stopping rule.
///
/// Per iteration the coordinator collects every node's dual difference
/// (`N` scalars), computes both dense coupling products (`4 N^2` flops),
/// returns per-node coupling pairs (`2 N` scalars), and broadcasts the head
/// cost derivative (1 message); the trace tallies these exchanges.
pub fn run_central(
    prob: &OpfProblem,
    sens: &SensitivityPair,
    opts: &SolveOptions,
    source: &VoltageSource,
) -> Result<(IterateState, RunTrace)> {
    let n = prob.node_count();
    if sens.node_count() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sens.node_count(),
        });
    }
    if !(opts.epsilon > 0.0) {
        return Err(Error::Infeasible(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    let eps = opts.epsilon;
    let phi = prob.phi();
    let start = Instant::now();

    let (mut p, mut q) = prob.initial_dispatch();
    let mut mu_lo = Array1::<f64>::zeros(n);
    let mut mu_hi = Array1::<f64>::zeros(n);
    let mut v = source.voltages(&p, &q)?;
    let mut p0 = feeder_head_power(&p, prob.p_inelastic());

    let mut trace = RunTrace::default();
    let mut iterates = if opts.record_iterates {
        Some(Vec::new())
    } else {
        None
    };
    let push_iterate = |store: &mut Option<Vec<Vec<f64>>>,
                        p: &Array1<f64>,
                        q: &Array1<f64>,
                        lo: &Array1<f64>,
                        hi: &Array1<f64>| {
        if let Some(list) = store {
            let mut z = Vec::with_capacity(4 * p.len());
            z.extend(p.iter());
            z.extend(q.iter());
            z.extend(lo.iter());
            z.extend(hi.iter());
            list.push(z);
        }
    };

    trace.rows.push(TraceRow {
        t: 0,
        residual: f64::INFINITY,
        objective: prob.objective(&p, &q),
        v_min: v.iter().copied().fold(f64::INFINITY, f64::min),
        v_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        p0,
        coupling_flops: 0,
        messages: 1, // initial head-gradient broadcast
        wall_secs: start.elapsed().as_secs_f64(),
    });
    push_iterate(&mut iterates, &p, &q, &mu_lo, &mu_hi);

    let mut detector = DivergenceDetector::new(opts.sigma);
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=opts.max_iter {
        let mut flops = FlopCounter::new();
        let diff = &mu_hi - &mu_lo;
        let rd = matvec(&sens.r, &diff, &mut flops);
        let xd = matvec(&sens.x, &diff, &mut flops);
        let c0p = prob.head_cost_derivative(p0);

        let mut res_sq = 0.0f64;
        let mut res_inf = 0.0f64;
        let mut p_new = Array1::zeros(n);
        let mut q_new = Array1::zeros(n);
        let mut lo_new = Array1::zeros(n);
        let mut hi_new = Array1::zeros(n);
        for (i, dev) in prob.devices().iter().enumerate() {
            let gp = 2.0 * dev.cp * (p[i] - dev.p_target) - c0p + rd[i];
            let gq = 2.0 * dev.cq * (q[i] - dev.q_target) + xd[i];
            let (pi, qi) = project_box((p[i] - eps * gp, q[i] - eps * gq), &dev.bounds);
            let li = (mu_lo[i] + eps * (prob.v_lo()[i] - v[i] - phi * mu_lo[i])).max(0.0);
            let hi = (mu_hi[i] + eps * (v[i] - prob.v_hi()[i] - phi * mu_hi[i])).max(0.0);
            for d in [pi - p[i], qi - q[i], li - mu_lo[i], hi - mu_hi[i]] {
                res_sq += d * d;
                res_inf = res_inf.max(d.abs());
            }
            p_new[i] = pi;
            q_new[i] = qi;
            lo_new[i] = li;
            hi_new[i] = hi;
        }
        p = p_new;
        q = q_new;
        mu_lo = lo_new;
        mu_hi = hi_new;
        v = source.voltages(&p, &q)?;
        let p0_prev = p0;
        p0 = feeder_head_power(&p, prob.p_inelastic());
        let residual = res_sq.sqrt();

        trace.rows.push(TraceRow {
            t,
            residual,
            objective: prob.objective(&p, &q),
            v_min: v.iter().copied().fold(f64::INFINITY, f64::min),
            v_max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            p0,
            coupling_flops: flops.total(),
            messages: 3 * n as u64 + 1,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        push_iterate(&mut iterates, &p, &q, &mu_lo, &mu_hi);
        iterations = t;

        let stop = match opts.stop {
            StopCriterion::FixedPoint => res_inf <= opts.sigma,
            StopCriterion::HeadPower => t >= HEAD_POWER_WARMUP && (p0 - p0_prev).abs() < opts.sigma,
        };
        if stop {
            converged = true;
            break;
        }
        detector.check(t, residual)?;
    }

    trace.converged = converged;
    trace.iterations = iterations;
    trace.iterates = iterates;
    let state = IterateState {
        t: iterations,
        p,
        q,
        mu_lo,
        mu_hi,
        v,
        p0,
    };
    Ok((state, trace))
}
