//! Shared builders and independent oracles for the acceptance suite.
//!
//! Everything here is deliberately separate from the library's own
//! computation paths: the direct saddle solver goes through an active-set
//! reduction and dense linear algebra, not the projected gradient loop.

use ndarray::{Array1, Array2};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use vreg_core::feeder::{build_sensitivity, FeederModel, Line, SensitivityPair};
use vreg_core::opf::{BoxSet, DeviceSpec, OpfProblem};

pub fn random_tree(n: usize, max_branch: usize, seed: u64) -> FeederModel {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    let mut child_count = vec![0usize; n + 1];
    for child in 1..=n {
        let eligible: Vec<usize> = (0..child)
            .filter(|&c| child_count[c] < max_branch)
            .collect();
        let parent = eligible[rng.gen_range(0..eligible.len())];
        child_count[parent] += 1;
        lines.push(Line {
            parent,
            child,
            r: rng.gen_range(0.002..0.02),
            x: rng.gen_range(0.004..0.04),
        });
    }
    FeederModel::without_loads(n, lines, 1.0).unwrap()
}

/// Random dispatch problem in the well-conditioned regime: moderate device
/// curvature, moderate regularization, loads that push some voltages into
/// the lower bound.
pub fn random_problem(n: usize, seed: u64) -> OpfProblem {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let devices = (0..n)
        .map(|_| {
            let cap = rng.gen_range(0.02..0.08);
            DeviceSpec::new(
                rng.gen_range(0.02..0.2),
                rng.gen_range(0.02..0.2),
                rng.gen_range(-0.08..-0.02),
                0.0,
                BoxSet::new(-cap, cap, -cap, cap).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let alpha = if seed % 2 == 0 { 0.0005 } else { 0.0 };
    OpfProblem::new(
        devices,
        Array1::from_elem(n, 0.99),
        Array1::from_elem(n, 1.05),
        alpha,
        -0.2,
        0.1,
        rng.gen_range(0.02..0.1),
    )
    .unwrap()
}

/// Rebuilds a problem with the lower voltage bound raised a little above
/// the voltages at the initial dispatch, so every dual is active and the
/// iteration has genuine work to do.
pub fn activate_lower_bounds(prob: &OpfProblem, sens: &SensitivityPair, margin: f64) -> OpfProblem {
    let (p, q) = prob.initial_dispatch();
    let v = vreg_core::feeder::voltages(sens, &p, &q).unwrap();
    let v_lo = v.mapv(|vi| vi + margin);
    let v_hi = v.mapv(|vi| vi + 0.2);
    OpfProblem::new(
        prob.devices().to_vec(),
        v_lo,
        v_hi,
        prob.alpha(),
        prob.p0_hat(),
        prob.p_inelastic(),
        prob.phi(),
    )
    .unwrap()
}

/// Least-squares line fit; returns (slope, r_squared).
pub fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for &(x, y) in points {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    (slope, r2)
}

/// Stiff two-node instance: one device nine times stiffer than the other
/// and moderate coupling, so ten times the certified bound flips the stiff
/// coordinate between box corners while the certified step contracts.
pub fn stiff_instance() -> (SensitivityPair, OpfProblem) {
    let lines = vec![
        Line {
            parent: 0,
            child: 1,
            r: 0.02,
            x: 0.04,
        },
        Line {
            parent: 1,
            child: 2,
            r: 0.03,
            x: 0.05,
        },
    ];
    let model = FeederModel::without_loads(2, lines, 1.0).unwrap();
    let sens = build_sensitivity(&model).unwrap();
    let free = BoxSet::new(-5.0, 5.0, -5.0, 5.0).unwrap();
    let devices = vec![
        DeviceSpec::new(0.9, 0.9, 0.0, 0.0, free).unwrap(),
        DeviceSpec::new(0.1, 0.1, 0.0, 0.0, free).unwrap(),
    ];
    let prob = OpfProblem::new(
        devices,
        ndarray::array![1.02, 1.02],
        ndarray::array![1.2, 1.2],
        0.0,
        0.0,
        0.0,
        0.2,
    )
    .unwrap();
    (sens, prob)
}

/// The fixed 30-node regularization-study instance: ten 3-node branches
/// off the slack. The two deepest nodes of each branch get a lower bound
/// just above their nominal voltage; everyone else sits far from theirs.
/// The active set is identical for every regularization weight in
/// `[0, 1e-2]`, which keeps the saddle-point drift linear in the weight.
pub fn star_instance() -> (FeederModel, OpfProblem, SensitivityPair) {
    let branches = 10;
    let depth = 3;
    let n = branches * depth;
    let mut lines = Vec::with_capacity(n);
    for b in 0..branches {
        for d in 0..depth {
            let node = b * depth + d + 1;
            let parent = if d == 0 { 0 } else { node - 1 };
            lines.push(Line {
                parent,
                child: node,
                r: 0.02,
                x: 0.04,
            });
        }
    }
    let model = FeederModel::new(n, lines, 1.0, vec![-0.04; n], vec![-0.02; n]).unwrap();
    let sens = build_sensitivity(&model).unwrap();

    let mut v_lo = Array1::from_elem(n, 0.85);
    for b in 0..branches {
        for d in [depth - 2, depth - 1] {
            let node = b * depth + d + 1;
            v_lo[node - 1] = sens.v_tilde[node - 1] + 0.02;
        }
    }
    let devices = (0..n)
        .map(|_| {
            DeviceSpec::new(
                0.02,
                0.02,
                0.0,
                0.0,
                BoxSet::new(-1.0, 1.0, -1.0, 1.0).unwrap(),
            )
            .unwrap()
        })
        .collect();
    let p_inelastic = 0.04 * n as f64;
    let prob = OpfProblem::new(
        devices,
        v_lo,
        Array1::from_elem(n, 1.2),
        0.0,
        0.0,
        p_inelastic,
        1e-3, // placeholder; the study rebuilds with each weight
    )
    .unwrap();
    (model, prob, sens)
}

pub fn with_phi(prob: &OpfProblem, phi: f64) -> OpfProblem {
    OpfProblem::new(
        prob.devices().to_vec(),
        prob.v_lo().clone(),
        prob.v_hi().clone(),
        prob.alpha(),
        prob.p0_hat(),
        prob.p_inelastic(),
        phi,
    )
    .unwrap()
}

/// Direct (non-iterative) saddle solver for instances with no head cost,
/// no active box constraint, and only lower voltage bounds active.
///
/// Eliminating the primal blocks with `p = p_t + Dp^-1 R mu`,
/// `q = q_t + Dq^-1 X mu` reduces the saddle conditions to an active-set
/// system in the lower duals: `(S_AA + phi I) mu_A = (v_lo - v_base)_A`
/// with `S = R Dp^-1 R + X Dq^-1 X`. Works for any `phi >= 0`, including
/// the unregularized saddle at `phi = 0`. Returns the stacked
/// `(p, q, mu_lo, mu_hi)` and panics if the assumed structure (boxes
/// inactive, upper bounds slack, KKT signs) does not hold.
pub fn direct_saddle(prob: &OpfProblem, sens: &SensitivityPair, phi: f64) -> Vec<f64> {
    let n = prob.node_count();
    assert_eq!(prob.alpha(), 0.0, "direct solver assumes no head cost");
    let dp_inv: Vec<f64> = prob.devices().iter().map(|d| 1.0 / (2.0 * d.cp)).collect();
    let dq_inv: Vec<f64> = prob.devices().iter().map(|d| 1.0 / (2.0 * d.cq)).collect();

    // S = R Dp^-1 R + X Dq^-1 X and the no-dual voltage v_base
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += sens.r[[i, k]] * dp_inv[k] * sens.r[[k, j]]
                    + sens.x[[i, k]] * dq_inv[k] * sens.x[[k, j]];
            }
            s[[i, j]] = acc;
        }
    }
    let targets_p: Array1<f64> = prob
        .devices()
        .iter()
        .map(|d| d.p_target)
        .collect::<Vec<_>>()
        .into();
    let targets_q: Array1<f64> = prob
        .devices()
        .iter()
        .map(|d| d.q_target)
        .collect::<Vec<_>>()
        .into();
    let mut v_base = sens.v_tilde.clone();
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..n {
            acc += sens.r[[i, k]] * targets_p[k] + sens.x[[i, k]] * targets_q[k];
        }
        v_base[i] += acc;
    }

    let mut active: Vec<bool> = (0..n).map(|i| v_base[i] < prob.v_lo()[i]).collect();
    let mut mu = vec![0.0; n];
    for _round in 0..200 {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        mu.iter_mut().for_each(|m| *m = 0.0);
        if !idx.is_empty() {
            let m = idx.len();
            let a = nalgebra::DMatrix::from_fn(m, m, |r, c| {
                s[[idx[r], idx[c]]] + if r == c { phi } else { 0.0 }
            });
            let rhs = nalgebra::DVector::from_fn(m, |r, _| prob.v_lo()[idx[r]] - v_base[idx[r]]);
            let sol = a
                .lu()
                .solve(&rhs)
                .expect("active-set system is nonsingular");
            for (slot, &i) in idx.iter().enumerate() {
                mu[i] = sol[slot];
            }
        }
        let v: Vec<f64> = (0..n)
            .map(|i| v_base[i] + (0..n).map(|j| s[[i, j]] * mu[j]).sum::<f64>())
            .collect();
        let mut changed = false;
        for i in 0..n {
            if active[i] && mu[i] < 0.0 {
                active[i] = false;
                changed = true;
            } else if !active[i] && v[i] < prob.v_lo()[i] - 1e-15 {
                active[i] = true;
                changed = true;
            }
        }
        if !changed {
            // assemble the full saddle point and verify the assumptions
            let mu_arr = Array1::from(mu.clone());
            let mut z = Vec::with_capacity(4 * n);
            let mut p = vec![0.0; n];
            let mut q = vec![0.0; n];
            for i in 0..n {
                let mut rp = 0.0;
                let mut xq = 0.0;
                for j in 0..n {
                    rp += sens.r[[i, j]] * mu_arr[j];
                    xq += sens.x[[i, j]] * mu_arr[j];
                }
                p[i] = targets_p[i] + dp_inv[i] * rp;
                q[i] = targets_q[i] + dq_inv[i] * xq;
                let dev = &prob.devices()[i];
                assert!(
                    dev.bounds.p_min < p[i] && p[i] < dev.bounds.p_max,
                    "box active at node {}: p = {}",
                    i + 1,
                    p[i]
                );
                assert!(dev.bounds.q_min < q[i] && q[i] < dev.bounds.q_max);
                assert!(
                    v[i] < prob.v_hi()[i],
                    "upper bound active at node {}",
                    i + 1
                );
                assert!(mu[i] >= 0.0);
            }
            z.extend(p);
            z.extend(q);
            z.extend(mu);
            z.extend(std::iter::repeat(0.0).take(n));
            return z;
        }
    }
    panic!("active set did not settle");
}

pub fn norm2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
}
