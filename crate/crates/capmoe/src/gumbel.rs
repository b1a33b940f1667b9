//! Gumbel noise, softmax, and argmax primitives.
//!
//! The Gumbel-max identity is used throughout: for a logit row `a_i`,
//! `argmax_j (a_ij / tau + g_ij)` with i.i.d. standard Gumbel `g_ij` is a
//! categorical draw from `softmax(a_i, tau)`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::types::{Assignment, GumbelNoise, LogitMatrix, ProbMatrix};

/// Maps a uniform draw `u` in (0, 1) to a standard Gumbel value.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Samples an `n x k` matrix of i.i.d. standard Gumbel noise.
///
/// Entries are drawn row-major, so the matrix is reproducible from the
/// stream's `(seed, stream)` pair alone.
pub fn sample_gumbel(rng: &mut RngStream, n: usize, k: usize) -> Result<GumbelNoise> {
    if n == 0 || k == 0 {
        return Err(Error::Dimension(format!(
            "gumbel noise needs n >= 1 and k >= 1, got {n}x{k}"
        )));
    }
    let entries = Array2::from_shape_fn((n, k), |_| gumbel_from_uniform(rng.open01()));
    GumbelNoise::from_entries(entries)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Dimension(format!("temperature must be positive and finite, got {tau}")))
    }
}

/// Row-wise tempered log-softmax: `log softmax(a_i / tau)` per row.
///
/// The row maximum is subtracted before exponentiation, so large logit gaps
/// (e.g. `a/tau = 100`) do not overflow.
pub fn log_softmax_rows(logits: &LogitMatrix, tau: f64) -> Result<LogitMatrix> {
    check_tau(tau)?;
    let mut out = logits.raw().clone();
    for mut row in out.rows_mut() {
        row.mapv_inplace(|v| v / tau);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - logsum);
    }
    LogitMatrix::new(out)
}

/// Row-wise tempered softmax: `softmax(a_i / tau)` per row.
pub fn softmax_rows(logits: &LogitMatrix, tau: f64) -> Result<ProbMatrix> {
    let log_probs = log_softmax_rows(logits, tau)?;
    ProbMatrix::new(log_probs.raw().mapv(f64::exp))
}

/// Row-wise argmax. Ties resolve to the lowest column index.
pub fn argmax_rows(scores: &Array2<f64>) -> Result<Assignment> {
    if scores.nrows() == 0 || scores.ncols() == 0 {
        return Err(Error::Dimension("argmax over empty matrix".into()));
    }
    let z = scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Assignment::new(z, scores.ncols())
}
