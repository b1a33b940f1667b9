//! Single-cell training: one estimator at one temperature on one seed,
//! running the full Adam loop and summarizing diagnostics.

use crate::config::{Estimator, ExperimentConfig};
use crate::error::{Error, Result};
use crate::estimators::{
    balance_ascent, gating_step, gm_weights, reinforce_grad, reinforce_weights, skip_weights,
    skip_weights_unweighted, unit_weights, EmaBaseline, GatingFlags, GradEstimate,
};
use crate::model::{
    analytic_grads, eval_mse, gen_dataset, per_point_loss, AdamState, MoeParams, ToyDataset,
    NUM_EXPERTS, NUM_PARAMS,
};
use crate::oracle::exact_grad;
use crate::rng::{streams, RngStream};
use crate::sampling::{
    make_proposal, sample_balanced, sample_independent, subsample_to_capacity,
};
use crate::sinkhorn::{sinkhorn_balance_log, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::sweep::RunRecord;

/// One training step's gradient estimate plus per-step diagnostics.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub estimate: GradEstimate,
    /// Fraction of the batch dropped by capacity subsampling (skip family).
    pub skip_fraction: f64,
    /// Sinkhorn iterations spent this step (proposal balancing plus
    /// marginal computation), 0 when Sinkhorn is unused.
    pub sinkhorn_iterations: f64,
}

/// Computes one gradient estimate for the given estimator on frozen
/// parameters. `rng_sample` drives categorical/Gumbel draws and
/// `rng_shuffle` drives capacity subsampling so the two stay independent.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    estimator: Estimator,
    tau: f64,
    cfg: &ExperimentConfig,
    params: &MoeParams,
    data: &ToyDataset,
    capacity: usize,
    baseline_value: f64,
    rng_sample: &mut RngStream,
    rng_shuffle: &mut RngStream,
) -> Result<StepOutcome> {
    match estimator {
        Estimator::Exact => Ok(StepOutcome {
            estimate: exact_grad(params, data)?,
            skip_fraction: 0.0,
            sinkhorn_iterations: 0.0,
        }),
        Estimator::Gating => {
            let flags = GatingFlags {
                use_iw: cfg.use_importance_weights,
                use_sinkhorn: cfg.use_sinkhorn_proposal,
                balanced_sampling: true,
            };
            let estimate =
                gating_step(params, data, tau, flags, cfg.balance_weight, capacity, rng_sample)?;
            Ok(StepOutcome { estimate, skip_fraction: 0.0, sinkhorn_iterations: 0.0 })
        }
        _ => reinforce_family_step(
            estimator,
            tau,
            cfg,
            params,
            data,
            capacity,
            baseline_value,
            rng_sample,
            rng_shuffle,
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn reinforce_family_step(
    estimator: Estimator,
    tau: f64,
    cfg: &ExperimentConfig,
    params: &MoeParams,
    data: &ToyDataset,
    capacity: usize,
    baseline_value: f64,
    rng_sample: &mut RngStream,
    rng_shuffle: &mut RngStream,
) -> Result<StepOutcome> {
    let n = data.len();
    let logits = params.log_prob_matrix(&data.x)?;
    let proposal = make_proposal(&logits, tau, cfg.use_sinkhorn_proposal)?;
    let mut sinkhorn_iterations = proposal.sinkhorn_iterations as f64;
    let use_iw = cfg.use_importance_weights;

    let (outcome, keep) = match estimator {
        Estimator::Sample => (sample_independent(&proposal.log_q, 1.0, rng_sample)?, None),
        Estimator::SampleSkip | Estimator::SampleSkipIw => {
            let out = sample_independent(&proposal.log_q, 1.0, rng_sample)?;
            let keep = subsample_to_capacity(&out.assignment, capacity, rng_shuffle);
            (out, Some(keep))
        }
        Estimator::GumbelMatching
        | Estimator::GumbelMatchingIw
        | Estimator::GumbelMatchingSh => {
            (sample_balanced(&proposal.log_q, 1.0, capacity, rng_sample)?, None)
        }
        Estimator::Gating | Estimator::Exact => {
            return Err(Error::Config(format!(
                "estimator {estimator} is not part of the REINFORCE family"
            )))
        }
    };
    let z = &outcome.assignment;
    let p_real: Vec<f64> = (0..n).map(|i| logits.get(i, z.expert(i)).exp()).collect();
    let ones = vec![1.0; n];

    let weights = match estimator {
        Estimator::Sample => {
            if use_iw {
                reinforce_weights(&p_real, &outcome.proposal_prob)?
            } else {
                unit_weights(n)
            }
        }
        Estimator::SampleSkipIw => {
            let keep = keep.as_ref().expect("skip family always has a keep mask");
            if use_iw {
                skip_weights(z, keep, &p_real, &outcome.proposal_prob, capacity)?
            } else {
                skip_weights(z, keep, &ones, &ones, capacity)?
            }
        }
        Estimator::SampleSkip => {
            let keep = keep.as_ref().expect("skip family always has a keep mask");
            if use_iw {
                skip_weights_unweighted(z, keep, &p_real, &outcome.proposal_prob)?
            } else {
                skip_weights_unweighted(z, keep, &ones, &ones)?
            }
        }
        Estimator::GumbelMatching => unit_weights(n),
        Estimator::GumbelMatchingIw => {
            if use_iw {
                gm_weights(&outcome, &p_real)?
            } else {
                unit_weights(n)
            }
        }
        Estimator::GumbelMatchingSh => {
            // Importance weights against the Sinkhorn marginals of the
            // tempered proposal rather than the exact conditionals.
            let sh = sinkhorn_balance_log(proposal.log_q.raw(), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            sinkhorn_iterations += sh.iterations as f64;
            let q_sh: Vec<f64> =
                (0..n).map(|i| sh.log_probs[[i, z.expert(i)]].exp()).collect();
            if use_iw {
                reinforce_weights(&p_real, &q_sh)?
            } else {
                unit_weights(n)
            }
        }
        Estimator::Gating | Estimator::Exact => unreachable!("handled above"),
    };

    let mut f = vec![0.0; n];
    let mut score_grads = vec![[0.0; 2]; n];
    let mut expert_grads = vec![[0.0; 2]; n];
    for i in 0..n {
        let j = z.expert(i);
        f[i] = per_point_loss(params, data.x[i], data.y[i], j);
        let (sg, eg) = analytic_grads(params, data.x[i], data.y[i], j);
        score_grads[i] = sg;
        expert_grads[i] = eg;
    }
    let mut estimate =
        reinforce_grad(&weights, &f, baseline_value, &score_grads, &expert_grads, z)?;
    let balance = balance_ascent(params, data, cfg.balance_weight)?;
    estimate.router[0] += balance[0];
    estimate.router[1] += balance[1];
    if !estimate.all_finite() {
        return Err(Error::NonFinite { context: "gradient estimate" });
    }
    let skip_fraction =
        keep.map_or(0.0, |k| (n - k.kept_count()) as f64 / n as f64);
    Ok(StepOutcome { estimate, skip_fraction, sinkhorn_iterations })
}

/// Runs one full training cell and summarizes it. Estimation failures
/// (non-finite losses or gradients, degenerate proposals) mark the cell
/// failed with `final_mse = NaN` instead of aborting the sweep.
pub fn train_cell(estimator: Estimator, tau: f64, seed: u64, cfg: &ExperimentConfig) -> RunRecord {
    let data = gen_dataset(seed);
    let mut params = MoeParams::init(seed);
    let mut adam = AdamState::new(NUM_PARAMS, cfg.learning_rate);
    let mut baseline = EmaBaseline::new(cfg.baseline_decay);
    let mut rng_sample = RngStream::new(seed, streams::SAMPLING);
    let mut rng_shuffle = RngStream::new(seed, streams::SHUFFLE);
    let capacity = data.len() / NUM_EXPERTS;

    let mut max_iw = 0.0f64;
    let mut skip_sum = 0.0;
    let mut sinkhorn_sum = 0.0;
    let mut steps_done = 0usize;
    let mut failed = false;
    for _ in 0..cfg.steps {
        let outcome = match train_step(
            estimator,
            tau,
            cfg,
            &params,
            &data,
            capacity,
            baseline.value,
            &mut rng_sample,
            &mut rng_shuffle,
        ) {
            Ok(o) => o,
            Err(_) => {
                failed = true;
                break;
            }
        };
        steps_done += 1;
        max_iw = max_iw.max(outcome.estimate.diagnostics.max_weight);
        skip_sum += outcome.skip_fraction;
        sinkhorn_sum += outcome.sinkhorn_iterations;
        // Baseline sees the batch mean only after the gradient used it.
        baseline.update(outcome.estimate.diagnostics.mean_f);
        let descent: Vec<f64> = outcome.estimate.to_vec().iter().map(|g| -g).collect();
        let mut pv = params.to_vec();
        if adam.step(&mut pv, &descent).is_err() {
            failed = true;
            break;
        }
        match MoeParams::from_vec(&pv) {
            Ok(p) if p.all_finite() => params = p,
            _ => {
                failed = true;
                break;
            }
        }
    }

    let final_mse = if failed { f64::NAN } else { eval_mse(&params, &data) };
    let steps_f = steps_done.max(1) as f64;
    RunRecord {
        estimator: estimator.name().to_string(),
        tau,
        seed,
        balance_weight: cfg.balance_weight,
        use_sinkhorn: cfg.use_sinkhorn_proposal,
        use_iw: cfg.use_importance_weights,
        final_mse,
        success: final_mse < cfg.success_threshold,
        max_iw,
        mean_skip_fraction: skip_sum / steps_f,
        mean_sinkhorn_iterations: sinkhorn_sum / steps_f,
    }
}
