//! Assignment sampling schemes: independent categorical routing, independent
//! routing with capacity subsampling (skip), and balanced Gumbel-Matching
//! sampling, each optionally preceded by Sinkhorn balancing of the proposal.

use crate::error::{Error, Result};
use crate::gumbel::{argmax_rows, log_softmax_rows, sample_gumbel, softmax_rows};
use crate::matching::{conditionals_from_solution, solve_gumbel_matching};
use crate::rng::RngStream;
use crate::sinkhorn::{sinkhorn_balance_log, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::types::{Assignment, LogitMatrix};
use ndarray::Array2;

/// Which scheme produced a [`SampleOutcome`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Independent,
    Balanced,
}

/// Per-datapoint keep indicator after capacity subsampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepMask {
    delta: Vec<bool>,
}

impl KeepMask {
    /// Wraps an explicit mask.
    pub fn new(delta: Vec<bool>) -> Self {
        Self { delta }
    }

    /// Whether datapoint `i` is kept.
    pub fn kept(&self, i: usize) -> bool {
        self.delta[i]
    }

    /// Number of datapoints.
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    /// True when the mask is empty.
    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    /// Number of kept datapoints.
    pub fn kept_count(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }
}

/// A sampled assignment together with the proposal probability of each
/// datapoint's realized expert. For the balanced scheme the proposal
/// probability is the conditional `q(z_i | logits, other rows' noise)`.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub assignment: Assignment,
    pub proposal_prob: Vec<f64>,
    pub scheme: Scheme,
}

/// Per-row categorical draws at temperature `tau` via Gumbel-max.
pub fn sample_independent(
    logits: &LogitMatrix,
    tau: f64,
    rng: &mut RngStream,
) -> Result<SampleOutcome> {
    let (n, k) = (logits.n(), logits.k());
    let probs = softmax_rows(logits, tau)?;
    let noise = sample_gumbel(rng, n, k)?;
    let scores = Array2::from_shape_fn((n, k), |(i, j)| logits.get(i, j) / tau + noise.get(i, j));
    let assignment = argmax_rows(&scores)?;
    let proposal_prob: Vec<f64> =
        (0..n).map(|i| probs.get(i, assignment.expert(i))).collect();
    if let Some(i) = proposal_prob.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::ZeroProposal { index: i, value: proposal_prob[i] });
    }
    Ok(SampleOutcome { assignment, proposal_prob, scheme: Scheme::Independent })
}

/// Uniform capacity subsampling: per expert, a uniformly random subset of
/// `min(n_j, c)` assigned datapoints is kept. Implemented by shuffling the
/// datapoint order and keeping the first `c` arrivals per expert, which is
/// equivalent to uniform subsetting.
pub fn subsample_to_capacity(z: &Assignment, capacity: usize, rng: &mut RngStream) -> KeepMask {
    let n = z.n();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut taken = vec![0usize; z.k()];
    let mut delta = vec![false; n];
    for &i in &order {
        let j = z.expert(i);
        if taken[j] < capacity {
            taken[j] += 1;
            delta[i] = true;
        }
    }
    KeepMask { delta }
}

/// Balanced assignment draw: perturbs logits with fresh Gumbel noise, solves
/// the capacity-constrained matching, and reports each datapoint's
/// conditional probability of its realized expert.
pub fn sample_balanced(
    logits: &LogitMatrix,
    tau: f64,
    capacity: usize,
    rng: &mut RngStream,
) -> Result<SampleOutcome> {
    let noise = sample_gumbel(rng, logits.n(), logits.k())?;
    let solution = solve_gumbel_matching(logits, &noise, tau, capacity)?;
    let conditionals = conditionals_from_solution(logits, tau, &solution)?;
    let proposal_prob: Vec<f64> = (0..logits.n())
        .map(|i| conditionals.get(i, solution.assignment.expert(i)))
        .collect();
    if let Some(i) = proposal_prob.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::ZeroProposal { index: i, value: proposal_prob[i] });
    }
    Ok(SampleOutcome { assignment: solution.assignment, proposal_prob, scheme: Scheme::Balanced })
}

/// A proposal distribution in log space, plus Sinkhorn diagnostics.
#[derive(Clone, Debug)]
pub struct Proposal {
    /// Normalized log-probabilities defining `q`; sample from these at
    /// temperature 1 (the original temperature is already folded in).
    pub log_q: LogitMatrix,
    /// Sinkhorn iterations used (0 when Sinkhorn is disabled).
    pub sinkhorn_iterations: usize,
    /// False only when Sinkhorn hit its iteration cap.
    pub sinkhorn_converged: bool,
}

/// Builds the proposal `q`: the tempered softmax of the logits, optionally
/// Sinkhorn-balanced so expected expert loads are uniform. Downstream
/// importance weights are computed against exactly this matrix. All work
/// stays in the log domain: at low temperatures the tempered probabilities
/// underflow `exp`, but their logs remain finite.
pub fn make_proposal(logits: &LogitMatrix, tau: f64, use_sinkhorn: bool) -> Result<Proposal> {
    let log_p = log_softmax_rows(logits, tau)?;
    if !use_sinkhorn {
        return Ok(Proposal { log_q: log_p, sinkhorn_iterations: 0, sinkhorn_converged: true });
    }
    let balanced = sinkhorn_balance_log(log_p.raw(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let log_q = LogitMatrix::new(balanced.log_probs)?;
    Ok(Proposal {
        log_q,
        sinkhorn_iterations: balanced.iterations,
        sinkhorn_converged: balanced.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;
    use ndarray::array;

    #[test]
    fn independent_sampling_respects_dominant_logit() {
        let logits = LogitMatrix::new(array![[50.0, 0.0]]).unwrap();
        let mut rng = RngStream::new(1, streams::SAMPLING);
        let out = sample_independent(&logits, 1.0, &mut rng).unwrap();
        assert_eq!(out.assignment.expert(0), 0);
        assert!(out.proposal_prob[0] > 0.999);
    }

    #[test]
    fn independent_sampling_is_symmetric_on_zero_logits() {
        let logits = LogitMatrix::new(Array2::zeros((1, 2))).unwrap();
        let mut rng = RngStream::new(2, streams::SAMPLING);
        let reps = 100_000;
        let mut ones = 0usize;
        for _ in 0..reps {
            ones += sample_independent(&logits, 1.0, &mut rng).unwrap().assignment.expert(0);
        }
        let freq = ones as f64 / reps as f64;
        let sigma = (0.25f64 / reps as f64).sqrt();
        assert!((freq - 0.5).abs() < 4.0 * sigma, "frequency {freq}");
    }

    #[test]
    fn independent_proposal_prob_is_softmax_entry() {
        let logits =
            LogitMatrix::new(array![[0.3, -0.7], [1.2, 0.4], [-0.5, 0.5]]).unwrap();
        let tau = 0.7;
        let probs = softmax_rows(&logits, tau).unwrap();
        let mut rng = RngStream::new(3, streams::SAMPLING);
        let out = sample_independent(&logits, tau, &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(out.proposal_prob[i], probs.get(i, out.assignment.expert(i)));
        }
    }

    #[test]
    fn subsample_keeps_min_of_count_and_capacity() {
        let z = Assignment::new(vec![0, 0, 0, 0], 2).unwrap();
        let mut rng = RngStream::new(4, streams::SHUFFLE);
        let mask = subsample_to_capacity(&z, 2, &mut rng);
        assert_eq!(mask.kept_count(), 2);
    }

    #[test]
    fn subsample_keeps_everything_under_capacity() {
        let z = Assignment::new(vec![0, 1, 0, 1], 2).unwrap();
        let mut rng = RngStream::new(5, streams::SHUFFLE);
        let mask = subsample_to_capacity(&z, 2, &mut rng);
        assert_eq!(mask.kept_count(), 4);
    }

    #[test]
    fn subsample_is_uniform_over_datapoints() {
        // All four datapoints on one expert with c = 2: each kept with
        // probability 1/2.
        let z = Assignment::new(vec![0, 0, 0, 0], 2).unwrap();
        let mut rng = RngStream::new(6, streams::SHUFFLE);
        let reps = 100_000;
        let mut kept = [0usize; 4];
        for _ in 0..reps {
            let mask = subsample_to_capacity(&z, 2, &mut rng);
            for (i, k) in kept.iter_mut().enumerate() {
                if mask.kept(i) {
                    *k += 1;
                }
            }
        }
        let sigma = (0.25f64 / reps as f64).sqrt();
        for (i, &count) in kept.iter().enumerate() {
            let freq = count as f64 / reps as f64;
            assert!((freq - 0.5).abs() < 3.0 * sigma, "datapoint {i}: {freq}");
        }
    }

    #[test]
    fn skip_keep_frequency_matches_min_ratio_for_random_assignments() {
        // For fixed z, each datapoint's keep probability is min(n_j, c)/n_j.
        let z = Assignment::new(vec![0, 0, 0, 1], 2).unwrap();
        let mut rng = RngStream::new(7, streams::SHUFFLE);
        let reps = 100_000;
        let mut kept = [0usize; 4];
        for _ in 0..reps {
            let mask = subsample_to_capacity(&z, 2, &mut rng);
            for (i, k) in kept.iter_mut().enumerate() {
                if mask.kept(i) {
                    *k += 1;
                }
            }
        }
        let expect = [2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0];
        for i in 0..4 {
            let freq = kept[i] as f64 / reps as f64;
            let sigma = (expect[i] * (1.0 - expect[i]) / reps as f64).sqrt().max(1e-9);
            assert!(
                (freq - expect[i]).abs() < 4.0 * sigma,
                "datapoint {i}: freq {freq} expected {}",
                expect[i]
            );
        }
    }

    #[test]
    fn balanced_sampling_is_always_feasible() {
        let mut rng = RngStream::new(8, streams::SAMPLING);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((6, 2), |_| rng.normal(0.0, 1.0))).unwrap();
        for _ in 0..200 {
            let out = sample_balanced(&logits, 1.0, 3, &mut rng).unwrap();
            assert_eq!(out.assignment.counts(), vec![3, 3]);
            assert!(out.proposal_prob.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn balanced_sampling_low_temperature_is_deterministic() {
        let mut rng = RngStream::new(9, streams::SAMPLING);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((4, 2), |_| rng.normal(0.0, 1.0))).unwrap();
        let first = sample_balanced(&logits, 1e-6, 2, &mut rng).unwrap();
        for _ in 0..50 {
            let out = sample_balanced(&logits, 1e-6, 2, &mut rng).unwrap();
            assert_eq!(out.assignment.experts(), first.assignment.experts());
        }
    }

    #[test]
    fn balanced_sampling_symmetric_marginals_on_zero_logits() {
        let logits = LogitMatrix::new(Array2::zeros((4, 2))).unwrap();
        let mut rng = RngStream::new(10, streams::SAMPLING);
        let reps = 100_000;
        let mut ones = [0usize; 4];
        for _ in 0..reps {
            let out = sample_balanced(&logits, 1.0, 2, &mut rng).unwrap();
            for (i, o) in ones.iter_mut().enumerate() {
                *o += out.assignment.expert(i);
            }
        }
        let sigma = (0.25f64 / reps as f64).sqrt();
        for (i, &count) in ones.iter().enumerate() {
            let freq = count as f64 / reps as f64;
            assert!((freq - 0.5).abs() < 3.0 * sigma, "datapoint {i}: {freq}");
        }
    }

    #[test]
    fn balanced_marginals_match_average_conditionals() {
        // Law of total probability: the per-datapoint marginal equals the
        // expectation of the conditional row over the other rows' noise.
        let mut rng = RngStream::new(11, streams::SAMPLING);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((4, 2), |_| rng.normal(0.0, 1.0))).unwrap();
        let reps = 40_000;
        let mut freq = [0.0f64; 4];
        let mut cond_mean = [0.0f64; 4];
        for _ in 0..reps {
            let out = sample_balanced(&logits, 1.0, 2, &mut rng).unwrap();
            let q = crate::matching::conditionals(
                &logits,
                &crate::gumbel::sample_gumbel(&mut rng, 4, 2).unwrap(),
                1.0,
                2,
            )
            .unwrap();
            for i in 0..4 {
                freq[i] += (out.assignment.expert(i) == 1) as u8 as f64;
                cond_mean[i] += q.get(i, 1);
            }
        }
        for i in 0..4 {
            let f = freq[i] / reps as f64;
            let c = cond_mean[i] / reps as f64;
            let sigma = (f * (1.0 - f) / reps as f64).sqrt().max(1e-4);
            assert!((f - c).abs() < 4.0 * sigma, "datapoint {i}: marginal {f} vs mean conditional {c}");
        }
    }

    #[test]
    fn proposal_without_sinkhorn_is_log_softmax() {
        let logits = LogitMatrix::new(array![[1.0, -1.0], [0.2, 0.8]]).unwrap();
        let proposal = make_proposal(&logits, 0.5, false).unwrap();
        let probs = softmax_rows(&logits, 0.5).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((proposal.log_q.get(i, j) - probs.get(i, j).ln()).abs() < 1e-12);
            }
        }
        assert_eq!(proposal.sinkhorn_iterations, 0);
    }

    #[test]
    fn proposal_with_sinkhorn_keeps_uniform_unchanged() {
        let logits = LogitMatrix::new(Array2::zeros((4, 2))).unwrap();
        let proposal = make_proposal(&logits, 1.0, true).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((proposal.log_q.get(i, j).exp() - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn proposal_with_sinkhorn_balances_columns() {
        let mut rng = RngStream::new(12, streams::SAMPLING);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((6, 2), |_| rng.normal(0.0, 2.0))).unwrap();
        let proposal = make_proposal(&logits, 0.5, true).unwrap();
        assert!(proposal.sinkhorn_converged);
        for j in 0..2 {
            let load: f64 = (0..6).map(|i| proposal.log_q.get(i, j).exp()).sum();
            assert!((load - 3.0).abs() < 1e-5, "column {j} load {load}");
        }
    }
}
