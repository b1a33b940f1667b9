//! Brute-force references: exhaustive enumeration of balanced assignments,
//! the exact Gibbs distribution over them, exact expected gradients of the
//! toy objective, and marginal comparisons between the balanced-sampling
//! distribution and its tractable approximations.
//!
//! Everything here is deliberately slow and simple; the solver, samplers,
//! and estimators are tested against these functions, never the reverse.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::estimators::{
    gm_weights, reinforce_grad, reinforce_weights, skip_weights, unit_weights, GradDiagnostics,
    GradEstimate, PerDatapointWeights,
};
use crate::gumbel::softmax_rows;
use crate::matching::{solve_gumbel_matching, ScoreMatrix};
use crate::model::{analytic_grads, gen_points, per_point_loss, MoeParams, ToyDataset, NUM_EXPERTS};
use crate::rng::RngStream;
use crate::sampling::{sample_balanced, sample_independent, subsample_to_capacity};
use crate::sinkhorn::{sinkhorn_balance, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::types::{Assignment, LogitMatrix};

/// Enumeration guard: refuse to materialize more assignments than this.
const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Number of balanced assignments, the multinomial `n! / (c!)^k`.
pub fn count_balanced(n: usize, k: usize, capacity: usize) -> Result<u128> {
    if k == 0 || capacity == 0 || n != k * capacity {
        return Err(Error::CapacityMismatch { n, k });
    }
    // Product of binomials C(n, c) * C(n-c, c) * ... computed factor by
    // factor; stays well inside u128 for every enumerable size.
    let mut total: u128 = 1;
    let mut remaining = n;
    for _ in 0..k {
        let mut choose: u128 = 1;
        for t in 0..capacity {
            choose = choose
                .checked_mul((remaining - t) as u128)
                .ok_or(Error::EnumerationTooLarge { count: u128::MAX, limit: ENUMERATION_LIMIT })?
                / (t as u128 + 1);
        }
        total = total
            .checked_mul(choose)
            .ok_or(Error::EnumerationTooLarge { count: u128::MAX, limit: ENUMERATION_LIMIT })?;
        remaining -= capacity;
    }
    Ok(total)
}

/// All assignments with exactly `capacity` datapoints per expert, in
/// lexicographic order of the expert-index vector.
pub fn enumerate_balanced(n: usize, k: usize, capacity: usize) -> Result<Vec<Assignment>> {
    let count = count_balanced(n, k, capacity)?;
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge { count, limit: ENUMERATION_LIMIT });
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut slots = vec![capacity; k];
    let mut z = Vec::with_capacity(n);
    fn recurse(
        i: usize,
        n: usize,
        k: usize,
        slots: &mut Vec<usize>,
        z: &mut Vec<usize>,
        out: &mut Vec<Assignment>,
    ) {
        if i == n {
            out.push(Assignment::new(z.clone(), k).expect("constructed in range"));
            return;
        }
        for j in 0..k {
            if slots[j] > 0 {
                slots[j] -= 1;
                z.push(j);
                recurse(i + 1, n, k, slots, z, out);
                z.pop();
                slots[j] += 1;
            }
        }
    }
    recurse(0, n, k, &mut slots, &mut z, &mut out);
    Ok(out)
}

/// Exact Gibbs distribution over balanced assignments:
/// `p(z) proportional to exp((1/tau) * sum_i a_{i, z_i})`.
pub fn gibbs_distribution(
    logits: &LogitMatrix,
    tau: f64,
    capacity: usize,
) -> Result<(Vec<Assignment>, Vec<f64>)> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Dimension(format!("temperature must be positive, got {tau}")));
    }
    let assignments = enumerate_balanced(logits.n(), logits.k(), capacity)?;
    let energies: Vec<f64> = assignments
        .iter()
        .map(|z| {
            z.experts().iter().enumerate().map(|(i, &j)| logits.get(i, j) / tau).sum::<f64>()
        })
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok((assignments, weights.into_iter().map(|w| w / total).collect()))
}

/// Enumeration optimum of `sum_i s_{i, z_i}` over balanced assignments.
pub fn best_balanced_value(scores: &ScoreMatrix, capacity: usize) -> Result<f64> {
    let assignments = enumerate_balanced(scores.n(), scores.k(), capacity)?;
    Ok(assignments
        .iter()
        .map(|z| scores.assignment_value(z))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Enumeration optimum subject to pinning datapoint `i` to expert `j`.
pub fn best_balanced_value_pinned(
    scores: &ScoreMatrix,
    capacity: usize,
    i: usize,
    j: usize,
) -> Result<f64> {
    let assignments = enumerate_balanced(scores.n(), scores.k(), capacity)?;
    Ok(assignments
        .iter()
        .filter(|z| z.expert(i) == j)
        .map(|z| scores.assignment_value(z))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Exact gradient of `E_{z ~ p(.|x)}[(1/n) sum_i f(x_i, z_i)]` in ascent
/// orientation. The objective is a sum of independent per-datapoint
/// expectations, so a closed-form sum over experts suffices.
pub fn exact_grad(params: &MoeParams, data: &ToyDataset) -> Result<GradEstimate> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Dimension("exact_grad needs a non-empty batch".into()));
    }
    let n_f = n as f64;
    let mut router = [0.0f64; 2];
    let mut experts = [[0.0f64; 2]; NUM_EXPERTS];
    let mut mean_f = 0.0;
    for i in 0..n {
        let (x, y) = (data.x[i], data.y[i]);
        for j in 0..NUM_EXPERTS {
            let p = params.prob(x, j);
            let f = per_point_loss(params, x, y, j);
            let (score_grad, expert_grad) = analytic_grads(params, x, y, j);
            router[0] += p * score_grad[0] * f;
            router[1] += p * score_grad[1] * f;
            experts[j][0] += p * expert_grad[0];
            experts[j][1] += p * expert_grad[1];
            mean_f += p * f;
        }
    }
    router[0] /= n_f;
    router[1] /= n_f;
    for e in experts.iter_mut() {
        e[0] /= n_f;
        e[1] /= n_f;
    }
    Ok(GradEstimate {
        router,
        experts,
        diagnostics: GradDiagnostics {
            mean_f: mean_f / n_f,
            effective_samples: n_f,
            max_weight: 1.0,
        },
    })
}

/// The three unbiased estimators checked against [`exact_grad`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnbiasedKind {
    /// On-policy REINFORCE: independent sampling from the router itself.
    OnPolicy,
    /// Independent sampling, capacity subsampling, skip reweighting.
    SampleSkipIw,
    /// Balanced sampling with conditional importance weights.
    GumbelMatchingIw,
}

impl UnbiasedKind {
    /// Roster of checked estimators.
    pub const ALL: [UnbiasedKind; 3] =
        [UnbiasedKind::OnPolicy, UnbiasedKind::SampleSkipIw, UnbiasedKind::GumbelMatchingIw];

    /// Stable name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            UnbiasedKind::OnPolicy => "on_policy",
            UnbiasedKind::SampleSkipIw => "sample_skip_iw",
            UnbiasedKind::GumbelMatchingIw => "gumbel_matching_iw",
        }
    }
}

/// One Monte-Carlo draw of an estimator on a frozen model; `baseline` is a
/// fixed scalar (unbiasedness must hold for any constant baseline).
/// `force_unit_weights` deliberately sabotages the correction factors so
/// fault-injection tests can confirm the check would catch a biased
/// estimator.
pub fn draw_estimate(
    kind: UnbiasedKind,
    params: &MoeParams,
    data: &ToyDataset,
    capacity: usize,
    baseline: f64,
    force_unit_weights: bool,
    rng_sample: &mut RngStream,
    rng_shuffle: &mut RngStream,
) -> Result<GradEstimate> {
    let n = data.len();
    let logits = params.log_prob_matrix(&data.x)?;
    let (assignment, weights): (Assignment, PerDatapointWeights) = match kind {
        UnbiasedKind::OnPolicy => {
            let out = sample_independent(&logits, 1.0, rng_sample)?;
            let p_real: Vec<f64> =
                (0..n).map(|i| logits.get(i, out.assignment.expert(i)).exp()).collect();
            let w = reinforce_weights(&p_real, &out.proposal_prob)?;
            (out.assignment, w)
        }
        UnbiasedKind::SampleSkipIw => {
            let out = sample_independent(&logits, 1.0, rng_sample)?;
            let keep = subsample_to_capacity(&out.assignment, capacity, rng_shuffle);
            let p_real: Vec<f64> =
                (0..n).map(|i| logits.get(i, out.assignment.expert(i)).exp()).collect();
            let w = if force_unit_weights {
                // Fault injection: keep the mask but drop the reweighting.
                let masked: Vec<f64> =
                    (0..n).map(|i| if keep.kept(i) { 1.0 } else { 0.0 }).collect();
                PerDatapointWeights { score: masked.clone(), value: masked }
            } else {
                skip_weights(&out.assignment, &keep, &p_real, &out.proposal_prob, capacity)?
            };
            (out.assignment, w)
        }
        UnbiasedKind::GumbelMatchingIw => {
            let out = sample_balanced(&logits, 1.0, capacity, rng_sample)?;
            let p_real: Vec<f64> =
                (0..n).map(|i| logits.get(i, out.assignment.expert(i)).exp()).collect();
            let w = if force_unit_weights {
                unit_weights(n)
            } else {
                gm_weights(&out, &p_real)?
            };
            (out.assignment, w)
        }
    };

    let mut f = vec![0.0; n];
    let mut score_grads = vec![[0.0; 2]; n];
    let mut expert_grads = vec![[0.0; 2]; n];
    for i in 0..n {
        let j = assignment.expert(i);
        f[i] = per_point_loss(params, data.x[i], data.y[i], j);
        let (sg, eg) = analytic_grads(params, data.x[i], data.y[i], j);
        score_grads[i] = sg;
        expert_grads[i] = eg;
    }
    reinforce_grad(&weights, &f, baseline, &score_grads, &expert_grads, &assignment)
}

/// Component-level result of a Monte-Carlo unbiasedness comparison.
#[derive(Clone, Debug)]
pub struct UnbiasednessRow {
    pub estimator: &'static str,
    pub config: usize,
    pub component: usize,
    pub exact: f64,
    pub mc_mean: f64,
    pub stderr: f64,
    pub zscore: f64,
    pub pass: bool,
}

/// Monte-Carlo mean of `draws` estimates for one frozen configuration,
/// compared component-wise against the exact gradient. A component passes
/// when its z-score is within 3 (stderr floored to dodge zero-variance
/// components).
pub fn unbiasedness_check(
    kind: UnbiasedKind,
    config_id: usize,
    params: &MoeParams,
    data: &ToyDataset,
    capacity: usize,
    baseline: f64,
    draws: usize,
    force_unit_weights: bool,
    seed: u64,
) -> Result<Vec<UnbiasednessRow>> {
    let exact = exact_grad(params, data)?.to_vec();
    let dim = exact.len();
    let mut sum = vec![0.0f64; dim];
    let mut sumsq = vec![0.0f64; dim];
    let mut rng_sample = RngStream::new(seed, crate::rng::streams::SAMPLING);
    let mut rng_shuffle = RngStream::new(seed, crate::rng::streams::SHUFFLE);
    for _ in 0..draws {
        let est = draw_estimate(
            kind,
            params,
            data,
            capacity,
            baseline,
            force_unit_weights,
            &mut rng_sample,
            &mut rng_shuffle,
        )?
        .to_vec();
        for (c, v) in est.iter().enumerate() {
            sum[c] += v;
            sumsq[c] += v * v;
        }
    }
    let n = draws as f64;
    let mut rows = Vec::with_capacity(dim);
    for c in 0..dim {
        let mean = sum[c] / n;
        let var = (sumsq[c] / n - mean * mean).max(0.0);
        let stderr = (var / n).sqrt().max(1e-12);
        let z = (mean - exact[c]) / stderr;
        rows.push(UnbiasednessRow {
            estimator: kind.name(),
            config: config_id,
            component: c,
            exact: exact[c],
            mc_mean: mean,
            stderr,
            zscore: z,
            pass: z.abs() <= 3.0,
        });
    }
    Ok(rows)
}

/// Marginal and joint comparison between the exact Gibbs distribution, the
/// empirical balanced-sampling distribution, the Sinkhorn-balanced matrix,
/// and the independent softmax.
#[derive(Clone, Debug)]
pub struct MarginalReport {
    /// Exact Gibbs per-datapoint marginals.
    pub gibbs: Array2<f64>,
    /// Empirical balanced-sampling marginals over `num_samples` draws.
    pub gm_empirical: Array2<f64>,
    /// Binomial standard error per empirical cell.
    pub gm_stderr: Array2<f64>,
    /// Sinkhorn-balanced tempered softmax.
    pub sinkhorn: Array2<f64>,
    /// Independent tempered softmax.
    pub softmax: Array2<f64>,
    /// max |gm_empirical - gibbs|.
    pub max_abs_gm_vs_gibbs: f64,
    /// max |sinkhorn - gm_empirical|.
    pub max_abs_sinkhorn_vs_gm: f64,
    /// max |softmax - gm_empirical|.
    pub max_abs_softmax_vs_gm: f64,
    /// Total variation between the Gibbs joint and the empirical joint.
    pub tv_gibbs_vs_empirical: f64,
    /// Number of Monte-Carlo draws behind the empirical columns.
    pub num_samples: usize,
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Builds a [`MarginalReport`] for one instance.
pub fn compare_marginals(
    logits: &LogitMatrix,
    tau: f64,
    capacity: usize,
    num_samples: usize,
    rng: &mut RngStream,
) -> Result<MarginalReport> {
    let (n, k) = (logits.n(), logits.k());
    let (assignments, gibbs_probs) = gibbs_distribution(logits, tau, capacity)?;
    let mut gibbs = Array2::zeros((n, k));
    for (z, &p) in assignments.iter().zip(&gibbs_probs) {
        for (i, &j) in z.experts().iter().enumerate() {
            gibbs[[i, j]] += p;
        }
    }

    let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
    for (idx, z) in assignments.iter().enumerate() {
        index.insert(z.experts().to_vec(), idx);
    }
    let mut joint_counts = vec![0usize; assignments.len()];
    let mut gm_counts = Array2::<f64>::zeros((n, k));
    for _ in 0..num_samples {
        let noise = crate::gumbel::sample_gumbel(rng, n, k)?;
        let sol = solve_gumbel_matching(logits, &noise, tau, capacity)?;
        let key = sol.assignment.experts().to_vec();
        let idx = *index
            .get(&key)
            .ok_or_else(|| Error::Dimension("solver produced an unbalanced assignment".into()))?;
        joint_counts[idx] += 1;
        for (i, &j) in sol.assignment.experts().iter().enumerate() {
            gm_counts[[i, j]] += 1.0;
        }
    }
    let gm_empirical = gm_counts.mapv(|c| c / num_samples as f64);
    let gm_stderr =
        gm_empirical.mapv(|p| (p * (1.0 - p) / num_samples as f64).sqrt());
    let tv_gibbs_vs_empirical = 0.5
        * joint_counts
            .iter()
            .zip(&gibbs_probs)
            .map(|(&c, &p)| (c as f64 / num_samples as f64 - p).abs())
            .sum::<f64>();

    let softmax = softmax_rows(logits, tau)?;
    let sinkhorn = sinkhorn_balance(&softmax, DEFAULT_TOL, DEFAULT_MAX_ITER)?.probs;

    Ok(MarginalReport {
        max_abs_gm_vs_gibbs: max_abs_diff(&gm_empirical, &gibbs),
        max_abs_sinkhorn_vs_gm: max_abs_diff(sinkhorn.raw(), &gm_empirical),
        max_abs_softmax_vs_gm: max_abs_diff(softmax.raw(), &gm_empirical),
        tv_gibbs_vs_empirical,
        gibbs,
        gm_empirical,
        gm_stderr,
        sinkhorn: sinkhorn.raw().clone(),
        softmax: softmax.raw().clone(),
        num_samples,
    })
}

/// Instance shapes used by the random solver checks: every combination of
/// n in {4, 6, 8} with k in {2, n/2}.
pub const SOLVER_CHECK_SIZES: [(usize, usize); 5] = [(4, 2), (6, 2), (6, 3), (8, 2), (8, 4)];

/// Outcome of comparing the matching solver against brute-force enumeration
/// on random instances.
#[derive(Clone, Debug)]
pub struct SolverCheck {
    pub instances: usize,
    /// Instances where the solver value missed the enumeration optimum.
    pub value_failures: usize,
    /// (i, j) cells where `conditional_values` missed the pinned optimum.
    pub conditional_failures: usize,
    /// Largest |solver - enumeration| value gap seen.
    pub max_value_gap: f64,
    /// Largest |conditional - pinned enumeration| gap seen.
    pub max_conditional_gap: f64,
}

/// Runs `instances` random solver-vs-enumeration comparisons (logits and
/// Gumbel noise standard normal, shapes cycling through
/// [`SOLVER_CHECK_SIZES`]); gaps beyond `tol` count as failures.
pub fn solver_vs_enumeration(instances: usize, tau: f64, tol: f64, seed: u64) -> Result<SolverCheck> {
    let mut rng = RngStream::new(seed, crate::rng::streams::ORACLE);
    let mut check = SolverCheck {
        instances,
        value_failures: 0,
        conditional_failures: 0,
        max_value_gap: 0.0,
        max_conditional_gap: 0.0,
    };
    for t in 0..instances {
        let (n, k) = SOLVER_CHECK_SIZES[t % SOLVER_CHECK_SIZES.len()];
        let capacity = n / k;
        let logits = LogitMatrix::new(Array2::from_shape_fn((n, k), |_| rng.normal(0.0, 1.0)))?;
        let noise = crate::gumbel::sample_gumbel(&mut rng, n, k)?;
        let solution = solve_gumbel_matching(&logits, &noise, tau, capacity)?;
        let scores = crate::matching::ScoreMatrix::build(&logits, &noise, tau)?;
        let best = best_balanced_value(&scores, capacity)?;
        let gap = (solution.value - best).abs();
        check.max_value_gap = check.max_value_gap.max(gap);
        if gap > tol {
            check.value_failures += 1;
        }
        let cond = crate::matching::conditional_values(&solution, &scores)?;
        for i in 0..n {
            for j in 0..k {
                let pinned = best_balanced_value_pinned(&scores, capacity, i, j)?;
                let cgap = (cond[[i, j]] - pinned).abs();
                check.max_conditional_gap = check.max_conditional_gap.max(cgap);
                if cgap > tol {
                    check.conditional_failures += 1;
                }
            }
        }
    }
    Ok(check)
}

/// Finite-difference audit of the analytic model gradients.
#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub configs: usize,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
}

/// Checks `analytic_grads` against central finite differences of the router
/// log-probability and the per-point reward over random configurations.
pub fn gradcheck(configs: usize, step: f64, tolerance: f64, seed: u64) -> GradcheckOutcome {
    let mut rng = RngStream::new(seed, crate::rng::streams::ORACLE);
    let mut max_rel: f64 = 0.0;
    for _ in 0..configs {
        let params = MoeParams {
            router_w: rng.normal(0.0, 1.0),
            router_b: rng.normal(0.0, 1.0),
            experts: [
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
            ],
        };
        let x = rng.uniform(-1.0, 1.0);
        let y = rng.uniform(-1.5, 1.5);
        let z = usize::from(rng.open01() < 0.5);
        let (router_grad, expert_grad) = analytic_grads(&params, x, y, z);
        let mut pv = params.to_vec();
        let log_p = |p: &MoeParams| p.log_prob_matrix(&[x]).expect("valid params").get(0, z);
        for (slot, analytic) in [(0usize, router_grad[0]), (1, router_grad[1])] {
            let orig = pv[slot];
            pv[slot] = orig + step;
            let hi = log_p(&MoeParams::from_vec(&pv).expect("slot count"));
            pv[slot] = orig - step;
            let lo = log_p(&MoeParams::from_vec(&pv).expect("slot count"));
            pv[slot] = orig;
            let fd = (hi - lo) / (2.0 * step);
            let scale = fd.abs().max(analytic.abs()).max(1e-3);
            max_rel = max_rel.max((fd - analytic).abs() / scale);
        }
        let base = 2 + 2 * z;
        for (off, analytic) in [(0usize, expert_grad[0]), (1, expert_grad[1])] {
            let slot = base + off;
            let orig = pv[slot];
            pv[slot] = orig + step;
            let hi = per_point_loss(&MoeParams::from_vec(&pv).expect("slot count"), x, y, z);
            pv[slot] = orig - step;
            let lo = per_point_loss(&MoeParams::from_vec(&pv).expect("slot count"), x, y, z);
            pv[slot] = orig;
            let fd = (hi - lo) / (2.0 * step);
            let scale = fd.abs().max(analytic.abs()).max(1e-3);
            max_rel = max_rel.max((fd - analytic).abs() / scale);
        }
    }
    GradcheckOutcome {
        configs,
        step,
        tolerance,
        max_rel_error: max_rel,
        pass: max_rel < tolerance,
    }
}

/// Aggregate outcome of the oracle report suite.
#[derive(Clone, Debug)]
pub struct OracleSuiteOutcome {
    pub pass: bool,
    pub solver: SolverCheck,
    pub unbiasedness: Vec<UnbiasednessRow>,
    pub unbiasedness_pass_fraction: f64,
    /// One `(tau, report)` marginal comparison per instance.
    pub marginals: Vec<(f64, MarginalReport)>,
}

/// Runs the brute-force check suite: solver vs enumeration, Monte-Carlo
/// unbiasedness for the three unbiased estimators on skewed random
/// configurations, and marginal comparisons. `inject_bias` deliberately
/// replaces the skip estimator's correction with unit weights so a failing
/// outcome confirms the check has teeth.
pub fn run_oracle_suite(draws: usize, inject_bias: bool, seed: u64) -> Result<OracleSuiteOutcome> {
    let solver = solver_vs_enumeration(200, 1.0, 1e-9, seed)?;

    let mut rng = RngStream::new(seed, crate::rng::streams::INIT);
    let mut unbiasedness = Vec::new();
    for config_id in 0..3 {
        // Skewed router so expert overflow is common and the skip
        // correction genuinely matters.
        let params = MoeParams {
            router_w: rng.normal(0.0, 1.0),
            router_b: rng.normal(0.8, 0.5),
            experts: [
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
            ],
        };
        let data = gen_points(seed.wrapping_add(config_id as u64), 8);
        for kind in UnbiasedKind::ALL {
            let force = inject_bias && kind == UnbiasedKind::SampleSkipIw;
            let rows = unbiasedness_check(
                kind,
                config_id,
                &params,
                &data,
                4,
                0.0,
                draws,
                force,
                seed.wrapping_add(1000 + config_id as u64),
            )?;
            unbiasedness.extend(rows);
        }
    }
    let passed = unbiasedness.iter().filter(|r| r.pass).count();
    let unbiasedness_pass_fraction = passed as f64 / unbiasedness.len() as f64;

    let mut marginals = Vec::new();
    let mut mrng = RngStream::new(seed, crate::rng::streams::ORACLE);
    for &tau in &[0.5, 1.0, 2.0] {
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((4, 2), |_| mrng.normal(0.0, 1.0)))?;
        let report = compare_marginals(&logits, tau, 2, 20_000, &mut mrng)?;
        marginals.push((tau, report));
    }

    let pass = solver.value_failures == 0
        && solver.conditional_failures == 0
        && unbiasedness_pass_fraction >= 0.95;
    Ok(OracleSuiteOutcome { pass, solver, unbiasedness, unbiasedness_pass_fraction, marginals })
}

/// Writes the suite's CSV reports into `out_dir` and returns the paths.
pub fn write_oracle_reports(
    outcome: &OracleSuiteOutcome,
    out_dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();

    let solver_path = out_dir.join("solver_vs_enumeration.csv");
    let mut w = csv::Writer::from_path(&solver_path)?;
    w.write_record([
        "instances",
        "value_failures",
        "conditional_failures",
        "max_value_gap",
        "max_conditional_gap",
    ])?;
    w.write_record([
        outcome.solver.instances.to_string(),
        outcome.solver.value_failures.to_string(),
        outcome.solver.conditional_failures.to_string(),
        outcome.solver.max_value_gap.to_string(),
        outcome.solver.max_conditional_gap.to_string(),
    ])?;
    w.flush()?;
    paths.push(solver_path);

    let unbiased_path = out_dir.join("unbiasedness.csv");
    let mut w = csv::Writer::from_path(&unbiased_path)?;
    w.write_record([
        "estimator", "config", "component", "exact", "mc_mean", "stderr", "zscore", "pass",
    ])?;
    for row in &outcome.unbiasedness {
        w.write_record([
            row.estimator.to_string(),
            row.config.to_string(),
            row.component.to_string(),
            row.exact.to_string(),
            row.mc_mean.to_string(),
            row.stderr.to_string(),
            row.zscore.to_string(),
            row.pass.to_string(),
        ])?;
    }
    w.flush()?;
    paths.push(unbiased_path);

    let summary_path = out_dir.join("marginal_summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record([
        "instance",
        "tau",
        "num_samples",
        "max_abs_gm_vs_gibbs",
        "max_abs_sinkhorn_vs_gm",
        "max_abs_softmax_vs_gm",
        "tv_gibbs_vs_empirical",
    ])?;
    for (idx, (tau, report)) in outcome.marginals.iter().enumerate() {
        w.write_record([
            idx.to_string(),
            tau.to_string(),
            report.num_samples.to_string(),
            report.max_abs_gm_vs_gibbs.to_string(),
            report.max_abs_sinkhorn_vs_gm.to_string(),
            report.max_abs_softmax_vs_gm.to_string(),
            report.tv_gibbs_vs_empirical.to_string(),
        ])?;
    }
    w.flush()?;
    paths.push(summary_path);

    let cells_path = out_dir.join("marginals.csv");
    let mut w = csv::Writer::from_path(&cells_path)?;
    w.write_record([
        "instance", "tau", "datapoint", "expert", "gibbs", "gm_empirical", "gm_stderr",
        "sinkhorn", "softmax",
    ])?;
    for (idx, (tau, report)) in outcome.marginals.iter().enumerate() {
        let (n, k) = report.gibbs.dim();
        for i in 0..n {
            for j in 0..k {
                w.write_record([
                    idx.to_string(),
                    tau.to_string(),
                    i.to_string(),
                    j.to_string(),
                    report.gibbs[[i, j]].to_string(),
                    report.gm_empirical[[i, j]].to_string(),
                    report.gm_stderr[[i, j]].to_string(),
                    report.sinkhorn[[i, j]].to_string(),
                    report.softmax[[i, j]].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    paths.push(cells_path);

    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gen_points;
    use crate::rng::streams;

    fn random_params(rng: &mut RngStream) -> MoeParams {
        MoeParams {
            router_w: rng.normal(0.0, 1.0),
            router_b: rng.normal(0.0, 1.0),
            experts: [
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
                [rng.normal(0.0, 1.0), rng.normal(0.0, 1.0)],
            ],
        }
    }

    #[test]
    fn enumeration_counts_match_formula() {
        assert_eq!(count_balanced(2, 2, 1).unwrap(), 2);
        assert_eq!(count_balanced(4, 2, 2).unwrap(), 6);
        assert_eq!(count_balanced(6, 3, 2).unwrap(), 90);
        assert_eq!(count_balanced(8, 4, 2).unwrap(), 2520);
        assert_eq!(enumerate_balanced(2, 2, 1).unwrap().len(), 2);
        assert_eq!(enumerate_balanced(4, 2, 2).unwrap().len(), 6);
        assert_eq!(enumerate_balanced(8, 2, 4).unwrap().len(), 70);
    }

    #[test]
    fn enumeration_is_balanced_and_duplicate_free() {
        let all = enumerate_balanced(6, 3, 2).unwrap();
        let mut seen = std::collections::HashSet::new();
        for z in &all {
            assert_eq!(z.counts(), vec![2, 2, 2]);
            assert!(seen.insert(z.experts().to_vec()), "duplicate assignment");
        }
    }

    #[test]
    fn enumeration_rejects_oversized_problems() {
        assert!(matches!(
            enumerate_balanced(40, 2, 20),
            Err(Error::EnumerationTooLarge { .. })
        ));
        assert!(enumerate_balanced(5, 2, 2).is_err());
    }

    #[test]
    fn gibbs_zero_logits_is_uniform() {
        let logits = LogitMatrix::new(Array2::zeros((4, 2))).unwrap();
        let (assignments, probs) = gibbs_distribution(&logits, 1.0, 2).unwrap();
        assert_eq!(assignments.len(), 6);
        for p in &probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gibbs_low_temperature_concentrates_on_optimum() {
        let mut rng = RngStream::new(51, streams::ORACLE);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((4, 2), |_| rng.normal(0.0, 1.0))).unwrap();
        let (assignments, probs) = gibbs_distribution(&logits, 1e-3, 2).unwrap();
        let scores = ScoreMatrix::from_raw(logits.raw().clone()).unwrap();
        let best = best_balanced_value(&scores, 2).unwrap();
        let best_idx = assignments
            .iter()
            .position(|z| (scores.assignment_value(z) - best).abs() < 1e-12)
            .unwrap();
        assert!(probs[best_idx] > 0.999, "mass on optimum: {}", probs[best_idx]);
    }

    #[test]
    fn exact_grad_zero_for_certain_router() {
        let mut rng = RngStream::new(52, streams::ORACLE);
        let mut params = random_params(&mut rng);
        params.router_w = 0.0;
        params.router_b = 50.0;
        let data = gen_points(3, 8);
        let g = exact_grad(&params, &data).unwrap();
        assert!(g.router[0].abs() < 1e-12);
        assert!(g.router[1].abs() < 1e-12);
    }

    #[test]
    fn exact_grad_matches_finite_differences_of_expected_objective() {
        // J(theta) = (1/n) sum_i sum_j p_ij f_ij has a closed form; exact_grad
        // must equal its central finite differences in every coordinate.
        let mut rng = RngStream::new(53, streams::ORACLE);
        let data = gen_points(5, 8);
        let objective = |p: &MoeParams| {
            let n = data.len();
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..NUM_EXPERTS {
                    total += p.prob(data.x[i], j) * per_point_loss(p, data.x[i], data.y[i], j);
                }
            }
            total / n as f64
        };
        let h = 1e-6;
        for _ in 0..20 {
            let params = random_params(&mut rng);
            let g = exact_grad(&params, &data).unwrap().to_vec();
            let mut pv = params.to_vec();
            for c in 0..pv.len() {
                let orig = pv[c];
                pv[c] = orig + h;
                let hi = objective(&MoeParams::from_vec(&pv).unwrap());
                pv[c] = orig - h;
                let lo = objective(&MoeParams::from_vec(&pv).unwrap());
                pv[c] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let scale = fd.abs().max(g[c].abs()).max(1e-3);
                assert!(
                    (fd - g[c]).abs() / scale < 1e-4,
                    "component {c}: fd {fd} vs exact {}",
                    g[c]
                );
            }
        }
    }

    #[test]
    fn on_policy_estimator_is_unbiased() {
        let mut rng = RngStream::new(54, streams::ORACLE);
        let params = random_params(&mut rng);
        let data = gen_points(7, 8);
        let rows = unbiasedness_check(
            UnbiasedKind::OnPolicy,
            0,
            &params,
            &data,
            4,
            0.0,
            60_000,
            false,
            900,
        )
        .unwrap();
        let passed = rows.iter().filter(|r| r.pass).count();
        assert!(passed >= 5, "only {passed}/6 components within 3 sigma: {rows:?}");
    }

    #[test]
    fn off_policy_reinforce_is_unbiased_for_tempered_proposals() {
        // Sample from softmax(logits, tau = 0.5) and correct with p/q; the
        // mean must still match the exact gradient.
        let mut rng = RngStream::new(55, streams::ORACLE);
        let params = random_params(&mut rng);
        let data = gen_points(11, 8);
        let exact = exact_grad(&params, &data).unwrap().to_vec();
        let logits = params.log_prob_matrix(&data.x).unwrap();
        let draws = 60_000;
        let mut sum = vec![0.0; 6];
        let mut sumsq = vec![0.0; 6];
        let mut rng_s = RngStream::new(901, streams::SAMPLING);
        for _ in 0..draws {
            let out = sample_independent(&logits, 0.5, &mut rng_s).unwrap();
            let p_real: Vec<f64> =
                (0..8).map(|i| logits.get(i, out.assignment.expert(i)).exp()).collect();
            let w = reinforce_weights(&p_real, &out.proposal_prob).unwrap();
            let mut f = vec![0.0; 8];
            let mut sg = vec![[0.0; 2]; 8];
            let mut eg = vec![[0.0; 2]; 8];
            for i in 0..8 {
                let j = out.assignment.expert(i);
                f[i] = per_point_loss(&params, data.x[i], data.y[i], j);
                let (a, b) = analytic_grads(&params, data.x[i], data.y[i], j);
                sg[i] = a;
                eg[i] = b;
            }
            let g = reinforce_grad(&w, &f, 0.0, &sg, &eg, &out.assignment).unwrap().to_vec();
            for c in 0..6 {
                sum[c] += g[c];
                sumsq[c] += g[c] * g[c];
            }
        }
        for c in 0..6 {
            let mean = sum[c] / draws as f64;
            let var = (sumsq[c] / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt().max(1e-12);
            assert!(
                ((mean - exact[c]) / se).abs() < 4.0,
                "component {c}: mean {mean} vs exact {} (se {se})",
                exact[c]
            );
        }
    }

    #[test]
    fn skip_estimator_is_unbiased_and_fault_injection_is_caught() {
        let mut rng = RngStream::new(56, streams::ORACLE);
        // Skew the router so one expert overflows often and the skip
        // correction actually matters.
        let mut params = random_params(&mut rng);
        params.router_b = 1.5;
        let data = gen_points(13, 8);
        let honest = unbiasedness_check(
            UnbiasedKind::SampleSkipIw,
            0,
            &params,
            &data,
            4,
            0.0,
            60_000,
            false,
            902,
        )
        .unwrap();
        let passed = honest.iter().filter(|r| r.pass).count();
        assert!(passed >= 5, "honest skip: {passed}/6 within 3 sigma");

        let sabotaged = unbiasedness_check(
            UnbiasedKind::SampleSkipIw,
            0,
            &params,
            &data,
            4,
            0.0,
            60_000,
            true,
            902,
        )
        .unwrap();
        let failed = sabotaged.iter().filter(|r| !r.pass).count();
        assert!(failed >= 1, "unit-weight sabotage went undetected: {sabotaged:?}");
    }

    #[test]
    fn gumbel_matching_estimator_is_unbiased() {
        let mut rng = RngStream::new(57, streams::ORACLE);
        let params = random_params(&mut rng);
        let data = gen_points(17, 8);
        let rows = unbiasedness_check(
            UnbiasedKind::GumbelMatchingIw,
            0,
            &params,
            &data,
            4,
            0.0,
            60_000,
            false,
            903,
        )
        .unwrap();
        let passed = rows.iter().filter(|r| r.pass).count();
        assert!(passed >= 5, "gm estimator: {passed}/6 within 3 sigma: {rows:?}");
    }

    #[test]
    fn estimator_mean_is_invariant_to_baseline() {
        let mut rng = RngStream::new(58, streams::ORACLE);
        let params = random_params(&mut rng);
        let data = gen_points(19, 8);
        let draws = 40_000;
        let mut means = Vec::new();
        for &baseline in &[0.0, 10.0] {
            let mut sum = vec![0.0; 6];
            let mut sumsq = vec![0.0; 6];
            let mut rng_s = RngStream::new(904, streams::SAMPLING);
            let mut rng_m = RngStream::new(904, streams::SHUFFLE);
            for _ in 0..draws {
                let g = draw_estimate(
                    UnbiasedKind::OnPolicy,
                    &params,
                    &data,
                    4,
                    baseline,
                    false,
                    &mut rng_s,
                    &mut rng_m,
                )
                .unwrap()
                .to_vec();
                for c in 0..6 {
                    sum[c] += g[c];
                    sumsq[c] += g[c] * g[c];
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / draws as f64).collect();
            let se: Vec<f64> = (0..6)
                .map(|c| {
                    let var = (sumsq[c] / draws as f64 - mean[c] * mean[c]).max(0.0);
                    (var / draws as f64).sqrt().max(1e-12)
                })
                .collect();
            means.push((mean, se));
        }
        for c in 0..2 {
            // Only the router components involve the baseline at all.
            let (m0, s0) = (&means[0].0[c], &means[0].1[c]);
            let (m1, s1) = (&means[1].0[c], &means[1].1[c]);
            let combined = (s0 * s0 + s1 * s1).sqrt();
            assert!(
                (m0 - m1).abs() < 3.0 * combined,
                "router component {c}: {m0} vs {m1} (combined se {combined})"
            );
        }
    }

    #[test]
    fn marginal_report_zero_logits_is_uniform_everywhere() {
        let logits = LogitMatrix::new(Array2::zeros((4, 2))).unwrap();
        let mut rng = RngStream::new(59, streams::ORACLE);
        let report = compare_marginals(&logits, 1.0, 2, 40_000, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((report.gibbs[[i, j]] - 0.5).abs() < 1e-12);
                assert!((report.sinkhorn[[i, j]] - 0.5).abs() < 1e-9);
                assert!((report.softmax[[i, j]] - 0.5).abs() < 1e-12);
                let se = report.gm_stderr[[i, j]].max(1e-9);
                assert!(
                    (report.gm_empirical[[i, j]] - 0.5).abs() < 4.0 * se,
                    "empirical marginal ({i},{j}) = {}",
                    report.gm_empirical[[i, j]]
                );
            }
        }
    }

    #[test]
    fn sinkhorn_marginals_are_closer_to_balanced_sampling_than_softmax() {
        let mut rng = RngStream::new(60, streams::ORACLE);
        let logits =
            LogitMatrix::new(Array2::from_shape_fn((4, 2), |_| rng.normal(0.0, 1.0))).unwrap();
        let report = compare_marginals(&logits, 1.0, 2, 60_000, &mut rng).unwrap();
        assert!(
            report.max_abs_sinkhorn_vs_gm < report.max_abs_softmax_vs_gm,
            "sinkhorn {} vs softmax {}",
            report.max_abs_sinkhorn_vs_gm,
            report.max_abs_softmax_vs_gm
        );
    }

    #[test]
    fn solver_matches_enumeration_on_random_instances() {
        let check = solver_vs_enumeration(100, 1.0, 1e-9, 61).unwrap();
        assert_eq!(check.value_failures, 0, "max gap {}", check.max_value_gap);
        assert_eq!(check.conditional_failures, 0, "max gap {}", check.max_conditional_gap);
    }

    #[test]
    fn gradcheck_passes_at_contract_tolerance() {
        let outcome = gradcheck(100, 1e-5, 1e-5, 62);
        assert!(outcome.pass, "max relative error {}", outcome.max_rel_error);
    }

    #[test]
    fn oracle_suite_passes_honestly_and_catches_injected_bias() {
        let honest = run_oracle_suite(20_000, false, 63).unwrap();
        assert!(
            honest.pass,
            "honest suite failed: solver {:?}, unbiasedness fraction {}",
            honest.solver, honest.unbiasedness_pass_fraction
        );
        assert_eq!(honest.unbiasedness.len(), 3 * 3 * 6);

        let sabotaged = run_oracle_suite(20_000, true, 63).unwrap();
        assert!(
            !sabotaged.pass,
            "injected bias went undetected (fraction {})",
            sabotaged.unbiasedness_pass_fraction
        );
    }

    #[test]
    fn oracle_reports_write_expected_files() {
        let outcome = run_oracle_suite(2_000, false, 64).unwrap();
        let dir = std::env::temp_dir().join("capmoe_oracle_test");
        let _ = std::fs::remove_dir_all(&dir);
        let paths = write_oracle_reports(&outcome, &dir).unwrap();
        assert_eq!(paths.len(), 4);
        for p in &paths {
            assert!(p.exists(), "{p:?} missing");
        }
        let unbiased = std::fs::read_to_string(dir.join("unbiasedness.csv")).unwrap();
        // Header plus one row per (estimator, config, component).
        assert_eq!(unbiased.lines().count(), 1 + outcome.unbiasedness.len());
        let summary = std::fs::read_to_string(dir.join("marginal_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 1 + outcome.marginals.len());
        let _ = std::fs::remove_dir_all(&dir);
    }
}
