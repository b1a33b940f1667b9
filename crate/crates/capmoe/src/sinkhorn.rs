//! Sinkhorn balancing of routing probabilities.
//!
//! Alternately rescales columns of a row-stochastic `n x k` matrix to sum to
//! `n/k` and rows to sum to 1. The fixed point is balanced in expectation:
//! sampling independently per row loads every expert equally on average.
//! All arithmetic runs in the log domain so low-temperature matrices with
//! entries near zero do not underflow.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::ProbMatrix;

/// Default tolerance on the maximum absolute marginal violation.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 1000;

/// Output of [`sinkhorn_balance`].
#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// The rescaled matrix; rows sum to 1 exactly (the final pass normalizes rows).
    pub probs: ProbMatrix,
    /// Number of column+row passes performed.
    pub iterations: usize,
    /// Final maximum absolute column-sum violation.
    pub residual: f64,
    /// False when the iteration cap was reached before the tolerance.
    pub converged: bool,
}

/// Output of [`sinkhorn_balance_log`]: the same rescaling without ever
/// leaving the log domain, for matrices whose entries underflow `exp`.
#[derive(Clone, Debug)]
pub struct SinkhornLogResult {
    /// Log of the rescaled matrix; rows log-sum-exp to 0.
    pub log_probs: Array2<f64>,
    /// Number of column+row passes performed.
    pub iterations: usize,
    /// Final maximum absolute column-sum violation.
    pub residual: f64,
    /// False when the iteration cap was reached before the tolerance.
    pub converged: bool,
}

fn log_sum_exp(values: ndarray::ArrayView1<'_, f64>) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    values.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max
}

/// Rescales `exp(log_p)` so columns sum to `n/k` and rows to 1, within `tol`,
/// entirely in the log domain. Entries of `-inf` encode exact zeros and stay
/// zero; a whole column of them is an error since no rescaling can fill it.
///
/// Each iteration normalizes columns first, then rows, and ends on the row
/// pass so the output is exactly row-stochastic. The result is a diagonal
/// rescaling of the input: `out_ij = in_ij + r_i + c_j` for offset vectors
/// `r` and `c`, so the support never grows.
pub fn sinkhorn_balance_log(
    log_p: &Array2<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<SinkhornLogResult> {
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(Error::Dimension(format!("sinkhorn tol must be positive, got {tol}")));
    }
    if max_iter == 0 {
        return Err(Error::Dimension("sinkhorn max_iter must be at least 1".into()));
    }
    let (n, k) = log_p.dim();
    if n == 0 || k == 0 {
        return Err(Error::Dimension("sinkhorn input must be non-empty".into()));
    }
    if log_p.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { context: "sinkhorn log input" });
    }
    let col_target = n as f64 / k as f64;
    let log_col_target = col_target.ln();
    let mut log_m = log_p.as_standard_layout().into_owned();
    for j in 0..k {
        if log_sum_exp(log_m.column(j)) == f64::NEG_INFINITY {
            return Err(Error::Dimension(format!(
                "column {j} has zero total mass; sinkhorn scaling cannot balance it"
            )));
        }
    }
    for i in 0..n {
        if log_sum_exp(log_m.row(i)) == f64::NEG_INFINITY {
            return Err(Error::Dimension(format!(
                "row {i} has zero total mass; sinkhorn scaling cannot balance it"
            )));
        }
    }

    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    let mut col_max = vec![f64::NEG_INFINITY; k];
    let mut col_sum = vec![0.0; k];
    let mut col_lse = vec![0.0; k];
    // This loop is the hot path of the Sinkhorn-marginal estimators (it runs
    // once per training step), so it works on the contiguous row-major slice
    // and fuses the column-offset and row-normalization passes.
    let slice_len = n * k;
    loop {
        {
            let s = log_m.as_slice().expect("standard layout");
            debug_assert_eq!(s.len(), slice_len);
            col_max.fill(f64::NEG_INFINITY);
            col_sum.fill(0.0);
            for row in s.chunks_exact(k) {
                for (j, &v) in row.iter().enumerate() {
                    if v > col_max[j] {
                        col_max[j] = v;
                    }
                }
            }
            for row in s.chunks_exact(k) {
                for (j, &v) in row.iter().enumerate() {
                    col_sum[j] += (v - col_max[j]).exp();
                }
            }
            for j in 0..k {
                col_lse[j] = col_sum[j].ln() + col_max[j];
            }
        }
        // One column reduction per pass serves both the convergence check of
        // the previous iteration and the next column offsets.
        if iterations > 0 {
            residual =
                col_lse.iter().map(|l| (l.exp() - col_target).abs()).fold(0.0, f64::max);
            if residual < tol {
                converged = true;
                break;
            }
        }
        if iterations == max_iter {
            break;
        }
        iterations += 1;
        let s = log_m.as_slice_mut().expect("standard layout");
        for row in s.chunks_exact_mut(k) {
            let mut row_max = f64::NEG_INFINITY;
            for (j, v) in row.iter_mut().enumerate() {
                *v += log_col_target - col_lse[j];
                if *v > row_max {
                    row_max = *v;
                }
            }
            let mut row_sum = 0.0;
            for &v in row.iter() {
                row_sum += (v - row_max).exp();
            }
            let offset = row_sum.ln() + row_max;
            for v in row.iter_mut() {
                *v -= offset;
            }
        }
    }

    Ok(SinkhornLogResult { log_probs: log_m, iterations, residual, converged })
}

/// Rescales `p` so columns sum to `n/k` and rows to 1, within `tol`.
///
/// Probability-domain wrapper around [`sinkhorn_balance_log`]; use the log
/// variant directly when entries may underflow.
pub fn sinkhorn_balance(p: &ProbMatrix, tol: f64, max_iter: usize) -> Result<SinkhornResult> {
    let out = sinkhorn_balance_log(&p.raw().mapv(f64::ln), tol, max_iter)?;
    let probs = ProbMatrix::new(out.log_probs.mapv(f64::exp))?;
    Ok(SinkhornResult {
        probs,
        iterations: out.iterations,
        residual: out.residual,
        converged: out.converged,
    })
}
