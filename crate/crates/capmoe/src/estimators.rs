//! Gradient estimators for router and expert parameters.
//!
//! All REINFORCE-style estimators share one shape: per-datapoint weights
//! multiply the score term `dlog p(z_i|x_i) * (f_i - b)` for the router and
//! the reward gradient `df_i` for the selected expert, then everything is
//! averaged over the batch. The weight choice determines the estimator:
//!
//! - importance ratio `p/q`: off-policy REINFORCE, unbiased for any proposal;
//! - `delta_i * (n_j / min(n_j, c)) * p/q`: skip-with-reweighting, unbiased
//!   under capacity subsampling;
//! - `p / q_cond` with balanced sampling: unbiased under Gumbel-Matching;
//! - all-ones or Sinkhorn-marginal ratios: the biased comparison variants.
//!
//! Estimates are ascent directions of the reward `f` (negated squared
//! error); trainers negate them before an Adam (descent) step.

use crate::error::{Error, Result};
use crate::model::{MoeParams, ToyDataset, NUM_EXPERTS};
use crate::rng::RngStream;
use crate::sampling::{make_proposal, sample_balanced, sample_independent, KeepMask, SampleOutcome, Scheme};
use crate::types::{Assignment, ProbMatrix};
use ndarray::Array2;

/// Per-datapoint multipliers for the router score term and the expert reward
/// term. Both use the same weights; a skipped datapoint carries exactly 0.
#[derive(Clone, Debug)]
pub struct PerDatapointWeights {
    pub score: Vec<f64>,
    pub value: Vec<f64>,
}

impl PerDatapointWeights {
    fn uniform_ratio(weights: Vec<f64>) -> Self {
        Self { score: weights.clone(), value: weights }
    }

    /// Number of datapoints.
    pub fn len(&self) -> usize {
        self.score.len()
    }

    /// True when there are no datapoints.
    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Largest absolute score-term weight (the max importance weight).
    pub fn max_weight(&self) -> f64 {
        self.score.iter().fold(0.0, |acc, w| acc.max(w.abs()))
    }

    /// Effective sample size `(sum w)^2 / sum w^2` over the score weights.
    pub fn effective_samples(&self) -> f64 {
        let sum: f64 = self.score.iter().map(|w| w.abs()).sum();
        let sq: f64 = self.score.iter().map(|w| w * w).sum();
        if sq == 0.0 {
            0.0
        } else {
            sum * sum / sq
        }
    }
}

/// Exponential-moving-average baseline for the score term.
#[derive(Clone, Debug)]
pub struct EmaBaseline {
    pub value: f64,
    pub decay: f64,
}

impl EmaBaseline {
    /// Baseline starting at 0 with the given decay.
    pub fn new(decay: f64) -> Self {
        Self { value: 0.0, decay }
    }

    /// `value <- decay * value + (1 - decay) * batch_mean`. Called after the
    /// gradient is computed, so the baseline never depends on the current batch.
    pub fn update(&mut self, batch_mean: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean;
    }
}

/// Summary statistics recorded with every gradient estimate.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradDiagnostics {
    /// Mean reward over datapoints with nonzero weight.
    pub mean_f: f64,
    /// Effective sample size of the score weights.
    pub effective_samples: f64,
    /// Largest absolute score weight.
    pub max_weight: f64,
}

/// A full-parameter gradient estimate in ascent orientation, laid out to
/// match [`MoeParams::to_vec`].
#[derive(Clone, Debug)]
pub struct GradEstimate {
    pub router: [f64; 2],
    pub experts: [[f64; 2]; NUM_EXPERTS],
    pub diagnostics: GradDiagnostics,
}

impl GradEstimate {
    /// Flattened gradient `[router_w, router_b, e0_w, e0_b, e1_w, e1_b]`.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.router[0],
            self.router[1],
            self.experts[0][0],
            self.experts[0][1],
            self.experts[1][0],
            self.experts[1][1],
        ]
    }

    /// True when every component is finite.
    pub fn all_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

fn check_ratios(p_real: &[f64], q_real: &[f64]) -> Result<Vec<f64>> {
    if p_real.len() != q_real.len() {
        return Err(Error::Dimension(format!(
            "p has {} entries, q has {}",
            p_real.len(),
            q_real.len()
        )));
    }
    let mut out = Vec::with_capacity(p_real.len());
    for (i, (&p, &q)) in p_real.iter().zip(q_real).enumerate() {
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::ZeroProposal { index: i, value: q });
        }
        let w = p / q;
        if !w.is_finite() {
            return Err(Error::NonFinite { context: "importance weight" });
        }
        out.push(w);
    }
    Ok(out)
}

/// Plain importance weights `p_i / q_i` for off-policy REINFORCE. On-policy
/// (`q = p`) reduces to all ones.
pub fn reinforce_weights(p_real: &[f64], q_real: &[f64]) -> Result<PerDatapointWeights> {
    Ok(PerDatapointWeights::uniform_ratio(check_ratios(p_real, q_real)?))
}

/// Skip-with-reweighting: kept datapoints are upweighted by
/// `n_j / min(n_j, c)` so dropping overflow keeps the estimator unbiased;
/// skipped datapoints get exactly 0.
pub fn skip_weights(
    z: &Assignment,
    keep: &KeepMask,
    p_real: &[f64],
    q_real: &[f64],
    capacity: usize,
) -> Result<PerDatapointWeights> {
    let n = z.n();
    if keep.len() != n || p_real.len() != n {
        return Err(Error::Dimension("keep mask and probabilities must match assignment".into()));
    }
    let ratios = check_ratios(p_real, q_real)?;
    let counts = z.counts();
    let weights: Vec<f64> = (0..n)
        .map(|i| {
            if keep.kept(i) {
                let nj = counts[z.expert(i)] as f64;
                ratios[i] * nj / nj.min(capacity as f64)
            } else {
                0.0
            }
        })
        .collect();
    Ok(PerDatapointWeights::uniform_ratio(weights))
}

/// The biased skip variant: no `n_j / min(n_j, c)` correction; the gradient
/// is instead averaged over the kept datapoints only (realized here as a
/// `n / n_kept` factor against the batch-size-n average downstream).
pub fn skip_weights_unweighted(
    z: &Assignment,
    keep: &KeepMask,
    p_real: &[f64],
    q_real: &[f64],
) -> Result<PerDatapointWeights> {
    let n = z.n();
    if keep.len() != n || p_real.len() != n {
        return Err(Error::Dimension("keep mask and probabilities must match assignment".into()));
    }
    let ratios = check_ratios(p_real, q_real)?;
    let kept = keep.kept_count().max(1) as f64;
    let rescale = n as f64 / kept;
    let weights: Vec<f64> =
        (0..n).map(|i| if keep.kept(i) { ratios[i] * rescale } else { 0.0 }).collect();
    Ok(PerDatapointWeights::uniform_ratio(weights))
}

/// Conditional importance weights `p_i / q(z_i | logits, other rows' noise)`
/// for balanced sampling.
pub fn gm_weights(outcome: &SampleOutcome, p_real: &[f64]) -> Result<PerDatapointWeights> {
    if outcome.scheme != Scheme::Balanced {
        return Err(Error::Dimension(
            "gm_weights requires an outcome from balanced sampling".into(),
        ));
    }
    reinforce_weights(p_real, &outcome.proposal_prob)
}

/// All-ones weights: the biased no-importance-weight variants.
pub fn unit_weights(n: usize) -> PerDatapointWeights {
    PerDatapointWeights::uniform_ratio(vec![1.0; n])
}

/// Assembles the REINFORCE gradient estimate:
/// router `(1/n) sum_i w_i * dlogp_i * (f_i - b)` and per-expert
/// `(1/n) sum_{i: z_i = j} w_i * df_i`.
///
/// `score_grads[i]` is `dlog p(z_i|x_i)/d(router)`, `expert_grads[i]` is
/// `df_i/d(expert z_i params)`. The reported `mean_f` averages over
/// datapoints with nonzero weight (skipped points never evaluate `f`).
pub fn reinforce_grad(
    weights: &PerDatapointWeights,
    f: &[f64],
    baseline: f64,
    score_grads: &[[f64; 2]],
    expert_grads: &[[f64; 2]],
    z: &Assignment,
) -> Result<GradEstimate> {
    let n = z.n();
    if weights.len() != n || f.len() != n || score_grads.len() != n || expert_grads.len() != n {
        return Err(Error::Dimension("estimator inputs must all have batch length".into()));
    }
    let n_f = n as f64;
    let mut router = [0.0f64; 2];
    let mut experts = [[0.0f64; 2]; NUM_EXPERTS];
    let mut f_sum = 0.0;
    let mut f_count = 0usize;
    for i in 0..n {
        let ws = weights.score[i];
        let wv = weights.value[i];
        if ws != 0.0 {
            let advantage = f[i] - baseline;
            router[0] += ws * score_grads[i][0] * advantage;
            router[1] += ws * score_grads[i][1] * advantage;
            f_sum += f[i];
            f_count += 1;
        }
        if wv != 0.0 {
            let j = z.expert(i);
            experts[j][0] += wv * expert_grads[i][0];
            experts[j][1] += wv * expert_grads[i][1];
        }
    }
    router[0] /= n_f;
    router[1] /= n_f;
    for e in experts.iter_mut() {
        e[0] /= n_f;
        e[1] /= n_f;
    }
    let estimate = GradEstimate {
        router,
        experts,
        diagnostics: GradDiagnostics {
            mean_f: if f_count == 0 { 0.0 } else { f_sum / f_count as f64 },
            effective_samples: weights.effective_samples(),
            max_weight: weights.max_weight(),
        },
    };
    if !estimate.all_finite() {
        return Err(Error::NonFinite { context: "gradient estimate" });
    }
    Ok(estimate)
}

/// Switch-style load balance loss `L = k * sum_j f_j * Pbar_j` with
/// `f_j = n_j / n` (dispatch fraction, non-differentiable) and
/// `Pbar_j = (1/n) sum_i probs_ij`. Returns the loss and `dL/dprobs_ij`,
/// which flows through `Pbar` only.
pub fn balance_loss(probs: &ProbMatrix, z: &Assignment) -> Result<(f64, Array2<f64>)> {
    let (n, k) = (probs.n(), probs.k());
    if z.n() != n || z.k() != k {
        return Err(Error::Dimension("assignment shape must match probabilities".into()));
    }
    let n_f = n as f64;
    let counts = z.counts();
    let dispatch: Vec<f64> = counts.iter().map(|&c| c as f64 / n_f).collect();
    let mut loss = 0.0;
    for j in 0..k {
        let pbar = probs.raw().column(j).sum() / n_f;
        loss += dispatch[j] * pbar;
    }
    loss *= k as f64;
    let grad = Array2::from_shape_fn((n, k), |(_, j)| k as f64 * dispatch[j] / n_f);
    Ok((loss, grad))
}

/// Ascent contribution of the weighted balance loss to the router
/// parameters: `-lambda * dL/d(router_w, router_b)` with `L` from
/// [`balance_loss`] evaluated at the temperature-1 router probabilities.
/// The dispatch fraction counts the router's own argmax choices, matching
/// the Switch formulation; a capacity-balanced sample would pin every count
/// to `c` and zero the gradient out.
pub fn balance_ascent(params: &MoeParams, data: &ToyDataset, weight: f64) -> Result<[f64; 2]> {
    if weight == 0.0 {
        return Ok([0.0, 0.0]);
    }
    let logits = params.log_prob_matrix(&data.x)?;
    let dispatch = crate::gumbel::argmax_rows(logits.raw())?;
    let probs = ProbMatrix::new(logits.raw().mapv(f64::exp))?;
    let (_, dl) = balance_loss(&probs, &dispatch)?;
    let mut out = [0.0f64; 2];
    for i in 0..data.len() {
        let sigma = params.router_prob1(data.x[i]);
        // dprobs_{i1}/dt = sigma(1-sigma), dprobs_{i0}/dt = -sigma(1-sigma)
        // with t the router pre-activation.
        let dt = sigma * (1.0 - sigma) * (dl[[i, 1]] - dl[[i, 0]]);
        out[0] -= weight * dt * data.x[i];
        out[1] -= weight * dt;
    }
    if !out[0].is_finite() || !out[1].is_finite() {
        return Err(Error::NonFinite { context: "balance loss gradient" });
    }
    Ok(out)
}

/// Variant switches for [`gating_step`].
#[derive(Clone, Copy, Debug)]
pub struct GatingFlags {
    /// Multiply each datapoint's loss term by the detached ratio `p/q`.
    pub use_iw: bool,
    /// Sinkhorn-balance the tempered proposal before sampling.
    pub use_sinkhorn: bool,
    /// Sample a balanced assignment instead of independent categoricals.
    pub balanced_sampling: bool,
}

/// Deterministic part of the gating estimator: with the assignment and the
/// (detached) per-datapoint weights fixed, returns the objective
/// `(1/n) sum_i iw_i (y_i - p_i e_i)^2` and its descent gradient, where
/// `p_i = p(z_i|x_i)` and `e_i` is the selected expert's output. The
/// gradient flows through both the probability factor and the expert output.
pub fn gating_objective_grad(
    params: &MoeParams,
    data: &ToyDataset,
    z: &Assignment,
    iw: &[f64],
) -> Result<(f64, GradEstimate)> {
    let n = data.len();
    if z.n() != n || iw.len() != n {
        return Err(Error::Dimension("gating inputs must have batch length".into()));
    }
    let n_f = n as f64;
    let mut router = [0.0f64; 2];
    let mut experts = [[0.0f64; 2]; NUM_EXPERTS];
    let mut objective = 0.0;
    for i in 0..n {
        let (x, y) = (data.x[i], data.y[i]);
        let j = z.expert(i);
        let sigma = params.router_prob1(x);
        let p = params.prob(x, j);
        let e = params.expert_out(j, x);
        let resid = y - p * e;
        objective += iw[i] * resid * resid;
        // d(resid^2)/dt = -2 resid e dp/dt with dp/dt = p (z - sigma).
        let dldt = -2.0 * resid * e * p * (j as f64 - sigma);
        router[0] += iw[i] * dldt * x;
        router[1] += iw[i] * dldt;
        let dlde = -2.0 * resid * p;
        experts[j][0] += iw[i] * dlde * x;
        experts[j][1] += iw[i] * dlde;
    }
    objective /= n_f;
    router[0] /= n_f;
    router[1] /= n_f;
    for e in experts.iter_mut() {
        e[0] /= n_f;
        e[1] /= n_f;
    }
    let grad = GradEstimate {
        router,
        experts,
        diagnostics: GradDiagnostics {
            mean_f: -objective,
            effective_samples: PerDatapointWeights::uniform_ratio(iw.to_vec())
                .effective_samples(),
            max_weight: iw.iter().fold(0.0f64, |acc, w| acc.max(w.abs())),
        },
    };
    if !objective.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite { context: "gating gradient" });
    }
    Ok((objective, grad))
}

/// One differentiable-gating estimate in ascent orientation: the negated
/// gradient of `(1/n) sum_i iw_i (y_i - p(z_i|x_i) expert_{z_i}(x_i))^2 +
/// balance_weight * L_balance`. The assignment is sampled from the tempered
/// (optionally Sinkhorn-balanced) proposal; the importance weights are
/// treated as detached constants.
pub fn gating_step(
    params: &MoeParams,
    data: &ToyDataset,
    tau: f64,
    flags: GatingFlags,
    balance_weight: f64,
    capacity: usize,
    rng: &mut RngStream,
) -> Result<GradEstimate> {
    let n = data.len();
    let logits = params.log_prob_matrix(&data.x)?;
    let proposal = make_proposal(&logits, tau, flags.use_sinkhorn)?;
    let outcome = if flags.balanced_sampling {
        sample_balanced(&proposal.log_q, 1.0, capacity, rng)?
    } else {
        sample_independent(&proposal.log_q, 1.0, rng)?
    };
    let z = &outcome.assignment;
    let iw: Vec<f64> = if flags.use_iw {
        let p_real: Vec<f64> = (0..n).map(|i| logits.get(i, z.expert(i)).exp()).collect();
        check_ratios(&p_real, &outcome.proposal_prob)?
    } else {
        vec![1.0; n]
    };
    let (_, descent) = gating_objective_grad(params, data, z, &iw)?;
    let balance = balance_ascent(params, data, balance_weight)?;
    Ok(GradEstimate {
        router: [-descent.router[0] + balance[0], -descent.router[1] + balance[1]],
        experts: [
            [-descent.experts[0][0], -descent.experts[0][1]],
            [-descent.experts[1][0], -descent.experts[1][1]],
        ],
        diagnostics: descent.diagnostics,
    })
}
