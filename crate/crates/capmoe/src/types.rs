//! Core value types shared by the samplers, the solver, and the estimators.
//!
//! All matrices are `n x k`: one row per datapoint, one column per expert.
//! Constructors validate finiteness and shape once so downstream numeric
//! code can assume well-formed inputs.

use ndarray::Array2;

use crate::error::{Error, Result};

fn ensure_finite(m: &Array2<f64>, context: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { context })
    }
}

fn ensure_shape(m: &Array2<f64>, context: &'static str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Dimension(format!(
            "{context} must be non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Router log-probabilities (or raw logits), one row per datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    entries: Array2<f64>,
}

impl LogitMatrix {
    /// Wraps an `n x k` matrix of finite values.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        ensure_shape(&entries, "logit matrix")?;
        ensure_finite(&entries, "logit matrix")?;
        Ok(Self { entries })
    }

    /// Number of datapoints (rows).
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of experts (columns).
    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    /// Entry for datapoint `i`, expert `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    /// Underlying matrix.
    pub fn raw(&self) -> &Array2<f64> {
        &self.entries
    }
}

/// Per-edge Gumbel noise, same shape as the logits it perturbs.
///
/// Production code obtains noise from [`crate::gumbel::sample_gumbel`] so
/// draws are reproducible from `(seed, stream)`; tests may pin entries
/// directly with [`GumbelNoise::from_entries`].
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    entries: Array2<f64>,
}

impl GumbelNoise {
    /// Wraps an explicit noise matrix. Entries must be finite.
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        ensure_shape(&entries, "gumbel noise")?;
        ensure_finite(&entries, "gumbel noise")?;
        Ok(Self { entries })
    }

    /// Number of datapoints (rows).
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of experts (columns).
    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    /// Entry for datapoint `i`, expert `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    /// Underlying matrix.
    pub fn raw(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Copy with row `i` replaced by `row`. Used by resampling oracles that
    /// hold all rows but one fixed.
    pub fn with_row(&self, i: usize, row: &[f64]) -> Result<Self> {
        if row.len() != self.k() {
            return Err(Error::Dimension(format!(
                "replacement row has length {}, expected {}",
                row.len(),
                self.k()
            )));
        }
        let mut entries = self.entries.clone();
        for (j, &v) in row.iter().enumerate() {
            entries[[i, j]] = v;
        }
        Self::from_entries(entries)
    }
}

/// An expert index per datapoint.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Assignment {
    z: Vec<usize>,
    k: usize,
}

impl Assignment {
    /// Wraps a vector of expert indices, each less than `k`.
    pub fn new(z: Vec<usize>, k: usize) -> Result<Self> {
        if z.is_empty() || k == 0 {
            return Err(Error::Dimension(
                "assignment needs at least one datapoint and one expert".into(),
            ));
        }
        if let Some(&bad) = z.iter().find(|&&j| j >= k) {
            return Err(Error::Dimension(format!(
                "expert index {bad} out of range for k = {k}"
            )));
        }
        Ok(Self { z, k })
    }

    /// Number of datapoints.
    pub fn n(&self) -> usize {
        self.z.len()
    }

    /// Number of experts.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Expert assigned to datapoint `i`.
    pub fn expert(&self, i: usize) -> usize {
        self.z[i]
    }

    /// Expert indices, one per datapoint.
    pub fn experts(&self) -> &[usize] {
        &self.z
    }

    /// Number of datapoints routed to each expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &j in &self.z {
            counts[j] += 1;
        }
        counts
    }

    /// True when every expert load is at most `capacity`.
    pub fn is_balanced(&self, capacity: usize) -> bool {
        self.counts().iter().all(|&c| c <= capacity)
    }
}

/// A row-stochastic `n x k` matrix of routing probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix {
    entries: Array2<f64>,
}

impl ProbMatrix {
    const ROW_SUM_TOL: f64 = 1e-9;

    /// Wraps an `n x k` matrix whose rows each sum to 1 within 1e-9 and
    /// whose entries are non-negative.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        ensure_shape(&entries, "probability matrix")?;
        ensure_finite(&entries, "probability matrix")?;
        if entries.iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite {
                context: "probability matrix (negative entry)",
            });
        }
        for (i, row) in entries.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::Dimension(format!(
                    "row {i} of probability matrix sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Number of datapoints (rows).
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Number of experts (columns).
    pub fn k(&self) -> usize {
        self.entries.ncols()
    }

    /// Entry for datapoint `i`, expert `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    /// Underlying matrix.
    pub fn raw(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Column sums, i.e. the expected expert loads.
    pub fn column_loads(&self) -> Vec<f64> {
        (0..self.k()).map(|j| self.entries.column(j).sum()).collect()
    }
}
