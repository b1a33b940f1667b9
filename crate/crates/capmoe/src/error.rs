//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the library.
///
/// Numeric routines validate their inputs eagerly: a non-finite logit or a
/// shape mismatch is a caller bug and is reported before any work is done.
#[derive(Error, Debug)]
pub enum Error {
    /// A matrix or vector contained NaN or infinity where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// Dimensions of an input do not satisfy the documented contract.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// The dataset size is not divisible by the expert count, so no exactly
    /// balanced assignment exists.
    #[error("dataset size {n} is not divisible by expert count {k}")]
    CapacityMismatch { n: usize, k: usize },

    /// A probability used as an importance-weight denominator was zero or negative.
    #[error("proposal probability {value:e} for datapoint {index} is not positive")]
    ZeroProposal { index: usize, value: f64 },

    /// The assignment solver exhausted its iteration budget without reaching
    /// a feasible or optimal state.
    #[error("matching solver failed to terminate: {0}")]
    SolverStuck(String),

    /// Brute-force enumeration was requested for a problem too large to enumerate.
    #[error("enumeration over {count} assignments exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    /// A configuration file or value failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed results CSV.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
