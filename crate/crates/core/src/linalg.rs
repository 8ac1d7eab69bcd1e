//! Small dense kernels with a fixed summation order.
//!
//! Solver results must be reproducible bit for bit across runs, and the
//! hierarchical driver is compared against the central one at tight
//! tolerances, so every inner product here accumulates in ascending index
//! order rather than delegating to a blocked or vectorized routine.

use ndarray::{Array1, Array2};

/// Counts coupling multiply-adds as two flops each (one multiply, one add).
///
/// Counters are incremented at the site that performs the work, so a trace's
/// flop column reflects arithmetic actually executed, not a formula.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    flops: u64,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.flops
    }

    pub fn reset(&mut self) {
        self.flops = 0;
    }

    #[inline]
    pub fn add_multiply_adds(&mut self, count: u64) {
        self.flops += 2 * count;
    }
}

/// `m^T x` for symmetric `m`, accumulating each row in ascending column
/// order. For the symmetric sensitivity matrices this equals `m x`.
pub fn matvec(m: &Array2<f64>, x: &Array1<f64>, flops: &mut FlopCounter) -> Array1<f64> {
    let (rows, cols) = m.dim();
    assert_eq!(cols, x.len(), "matvec dimension mismatch");
    let mut out = Array1::zeros(rows);
    for i in 0..rows {
        let mut acc = 0.0;
        for j in 0..cols {
            acc += m[[i, j]] * x[j];
        }
        out[i] = acc;
    }
    flops.add_multiply_adds((rows * cols) as u64);
    out
}

/// Ascending-order dot product.
pub fn dot(a: &[f64], b: &[f64], flops: &mut FlopCounter) -> f64 {
    assert_eq!(a.len(), b.len(), "dot dimension mismatch");
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    flops.add_multiply_adds(a.len() as u64);
    acc
}

/// Euclidean norm, ascending order.
pub fn norm2(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in x {
        acc += v * v;
    }
    acc.sqrt()
}

/// Max-magnitude norm.
pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
}
