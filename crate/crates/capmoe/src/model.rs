//! Two-expert toy regression model: a sigmoid router over two linear
//! experts, squared-error reward, analytic gradients, and Adam.
//!
//! The target is piecewise linear with a breakpoint at `x = 0.5`; the left
//! segment covers 75% of the input range, so a balanced capacity of
//! `c = n/2` datapoints per expert is genuinely binding for the optimal
//! routing split.

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::types::LogitMatrix;
use ndarray::Array2;

/// Datapoints per generated dataset.
pub const DATASET_SIZE: usize = 100;
/// Experts in the toy model.
pub const NUM_EXPERTS: usize = 2;
/// Flattened parameter count: router `(w, b)` plus two expert `(w, b)` pairs.
pub const NUM_PARAMS: usize = 6;

/// Piecewise-linear regression target; `x = 0.5` belongs to the right segment.
pub fn target_fn(x: f64) -> f64 {
    if x < 0.5 {
        0.8 * x - 0.2
    } else {
        -2.0 * x + 2.0
    }
}

/// A regression dataset. [`gen_dataset`] produces the standard 100-point
/// training set; oracle checks build smaller batches with [`gen_points`].
#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ToyDataset {
    /// Number of datapoints.
    pub fn len(&self) -> usize {
        self.x.len()
    }

    /// True when the dataset has no datapoints.
    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Generates `n` points `x ~ Uniform(-1, 1)`, `y = target(x) + Normal(0, 0.1^2)`.
pub fn gen_points(seed: u64, n: usize) -> ToyDataset {
    let mut rng = RngStream::new(seed, streams::DATASET);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = rng.uniform(-1.0, 1.0);
        x.push(xi);
        y.push(target_fn(xi) + rng.normal(0.0, 0.1));
    }
    ToyDataset { x, y }
}

/// The standard 100-point training dataset for a seed.
pub fn gen_dataset(seed: u64) -> ToyDataset {
    gen_points(seed, DATASET_SIZE)
}

/// Router and expert parameters.
///
/// `p(z = 1 | x) = sigmoid(router_w * x + router_b)`;
/// `expert_j(x) = experts[j][0] * x + experts[j][1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeParams {
    pub router_w: f64,
    pub router_b: f64,
    pub experts: [[f64; 2]; NUM_EXPERTS],
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

impl MoeParams {
    /// Seeded initialization: router at the symmetric point `(0, 0)`, expert
    /// weights and biases from `Normal(0, 0.5^2)` to break expert symmetry.
    pub fn init(seed: u64) -> Self {
        let mut rng = RngStream::new(seed, streams::INIT);
        let mut experts = [[0.0; 2]; NUM_EXPERTS];
        for e in experts.iter_mut() {
            e[0] = rng.normal(0.0, 0.5);
            e[1] = rng.normal(0.0, 0.5);
        }
        Self { router_w: 0.0, router_b: 0.0, experts }
    }

    /// `p(z = 1 | x)`.
    pub fn router_prob1(&self, x: f64) -> f64 {
        sigmoid(self.router_w * x + self.router_b)
    }

    /// `p(z = j | x)`.
    pub fn prob(&self, x: f64, j: usize) -> f64 {
        let p1 = self.router_prob1(x);
        if j == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// Prediction of expert `j` at `x`.
    pub fn expert_out(&self, j: usize, x: f64) -> f64 {
        self.experts[j][0] * x + self.experts[j][1]
    }

    /// Normalized router log-probabilities, one row per datapoint:
    /// `ln p(z=0|x) = -softplus(t)`, `ln p(z=1|x) = -softplus(-t)`.
    pub fn log_prob_matrix(&self, xs: &[f64]) -> Result<LogitMatrix> {
        if xs.is_empty() {
            return Err(Error::Dimension("log_prob_matrix needs at least one datapoint".into()));
        }
        let m = Array2::from_shape_fn((xs.len(), NUM_EXPERTS), |(i, j)| {
            let t = self.router_w * xs[i] + self.router_b;
            if j == 0 {
                -softplus(t)
            } else {
                -softplus(-t)
            }
        });
        LogitMatrix::new(m)
    }

    /// Flattened parameters `[router_w, router_b, e0_w, e0_b, e1_w, e1_b]`.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.router_w,
            self.router_b,
            self.experts[0][0],
            self.experts[0][1],
            self.experts[1][0],
            self.experts[1][1],
        ]
    }

    /// Inverse of [`MoeParams::to_vec`].
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() != NUM_PARAMS {
            return Err(Error::Dimension(format!(
                "expected {NUM_PARAMS} parameters, got {}",
                v.len()
            )));
        }
        Ok(Self {
            router_w: v[0],
            router_b: v[1],
            experts: [[v[2], v[3]], [v[4], v[5]]],
        })
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Reward of routing `(x, y)` to expert `z`: the negated squared error, so
/// larger is better and estimators maximize. The harness reports
/// `MSE = -mean(f)`.
pub fn per_point_loss(params: &MoeParams, x: f64, y: f64, z: usize) -> f64 {
    let err = y - params.expert_out(z, x);
    -(err * err)
}

/// Closed-form gradients at one datapoint under assignment `z`:
/// `(d log p(z|x) / d(router_w, router_b), d f / d(expert_z w, b))`.
pub fn analytic_grads(params: &MoeParams, x: f64, y: f64, z: usize) -> ([f64; 2], [f64; 2]) {
    let sigma = params.router_prob1(x);
    let resid = z as f64 - sigma;
    let router = [resid * x, resid];
    let err = y - params.expert_out(z, x);
    let expert = [2.0 * err * x, 2.0 * err];
    (router, expert)
}

/// Evaluation MSE with deterministic argmax routing (`z = 1` iff
/// `p(z=1|x) > 0.5`; the tie goes to expert 0) and no capacity constraint.
pub fn eval_mse(params: &MoeParams, data: &ToyDataset) -> f64 {
    let n = data.len();
    let mut total = 0.0;
    for i in 0..n {
        let z = usize::from(params.router_prob1(data.x[i]) > 0.5);
        let err = data.y[i] - params.expert_out(z, data.x[i]);
        total += err * err;
    }
    total / n as f64
}

/// Adam optimizer state over a flat parameter vector (minimization).
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state for `dim` parameters.
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected descent step along `grad` (the gradient of the
    /// quantity being minimized).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite { context: "adam gradient" });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for idx in 0..params.len() {
            self.m[idx] = self.beta1 * self.m[idx] + (1.0 - self.beta1) * grad[idx];
            self.v[idx] = self.beta2 * self.v[idx] + (1.0 - self.beta2) * grad[idx] * grad[idx];
            let m_hat = self.m[idx] / b1t;
            let v_hat = self.v[idx] / b2t;
            params[idx] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_fn_matches_piecewise_definition() {
        assert!((target_fn(0.0) + 0.2).abs() < 1e-15);
        assert!((target_fn(0.5) - 1.0).abs() < 1e-15);
        assert!((target_fn(-1.0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn datasets_are_reproducible_and_in_range() {
        let a = gen_dataset(4);
        let b = gen_dataset(4);
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.len(), DATASET_SIZE);
        assert!(a.x.iter().all(|&x| (-1.0..1.0).contains(&x)));
    }

    #[test]
    fn dataset_noise_has_expected_scale() {
        let big = gen_points(8, 100_000);
        let noise: Vec<f64> =
            big.x.iter().zip(&big.y).map(|(&x, &y)| y - target_fn(x)).collect();
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let var =
            noise.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (noise.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd - 0.1).abs() < 0.003, "noise sd {sd} too far from 0.1");
        assert!(mean.abs() < 0.002);
    }

    #[test]
    fn loss_is_negated_squared_error() {
        let params = MoeParams { router_w: 0.0, router_b: 0.0, experts: [[1.0, 0.0], [0.0, 0.0]] };
        // expert 0 predicts x exactly.
        assert_eq!(per_point_loss(&params, 0.3, 0.3, 0), 0.0);
        let f = per_point_loss(&params, 0.3, 0.4, 0);
        assert!((f + 0.01).abs() < 1e-12);
        assert!(f <= 0.0);
    }

    #[test]
    fn log_prob_matrix_is_normalized_and_stable() {
        let params = MoeParams { router_w: 40.0, router_b: 0.0, experts: [[0.0; 2]; 2] };
        let m = params.log_prob_matrix(&[-1.0, 0.0, 1.0]).unwrap();
        for i in 0..3 {
            let s = m.get(i, 0).exp() + m.get(i, 1).exp();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(m.get(i, 0).is_finite() && m.get(i, 1).is_finite());
        }
        // Saturated rows stay finite: ln p ~ -40, not -inf.
        assert!(m.get(2, 0) < -30.0);
    }

    #[test]
    fn analytic_grads_match_finite_differences() {
        let mut rng = RngStream::new(77, streams::ORACLE);
        let h = 1e-5;
        for _ in 0..100 {
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

            let log_p = |p: &MoeParams| p.log_prob_matrix(&[x]).unwrap().get(0, z);
            let mut pv = params.to_vec();
            for (slot, analytic) in [(0usize, router_grad[0]), (1, router_grad[1])] {
                let orig = pv[slot];
                pv[slot] = orig + h;
                let hi = log_p(&MoeParams::from_vec(&pv).unwrap());
                pv[slot] = orig - h;
                let lo = log_p(&MoeParams::from_vec(&pv).unwrap());
                pv[slot] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (fd - analytic).abs() / scale < 1e-5,
                    "router slot {slot}: fd {fd} vs analytic {analytic}"
                );
            }

            let loss = |p: &MoeParams| per_point_loss(p, x, y, z);
            let base = 2 + 2 * z;
            for (off, analytic) in [(0usize, expert_grad[0]), (1, expert_grad[1])] {
                let slot = base + off;
                let orig = pv[slot];
                pv[slot] = orig + h;
                let hi = loss(&MoeParams::from_vec(&pv).unwrap());
                pv[slot] = orig - h;
                let lo = loss(&MoeParams::from_vec(&pv).unwrap());
                pv[slot] = orig;
                let fd = (hi - lo) / (2.0 * h);
                let scale = analytic.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (fd - analytic).abs() / scale < 1e-5,
                    "expert slot {slot}: fd {fd} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn router_gradient_vanishes_when_certain_and_correct() {
        let params = MoeParams { router_w: 0.0, router_b: 50.0, experts: [[0.0; 2]; 2] };
        // sigma ~ 1 and z = 1: residual ~ 0.
        let (router_grad, _) = analytic_grads(&params, 0.3, 0.0, 1);
        assert!(router_grad[0].abs() < 1e-12);
        assert!(router_grad[1].abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(2, 0.1);
        let mut params = vec![1.0, -2.0];
        adam.step(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(1, 0.1);
        let mut params = vec![0.0];
        adam.step(&mut params, &[0.5]).unwrap();
        // Bias correction makes the first update lr * g/(|g| + ~0) = lr * sign(g).
        assert!((params[0] + 0.1).abs() < 1e-6, "first step was {}", params[0]);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut adam = AdamState::new(1, 0.05);
        let mut params = vec![0.0];
        let mut prev = 0.0;
        for _ in 0..20 {
            adam.step(&mut params, &[1.0]).unwrap();
            assert!(params[0] < prev);
            prev = params[0];
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut adam = AdamState::new(1, 0.1);
        let mut params = vec![0.0];
        assert!(adam.step(&mut params, &[f64::NAN]).is_err());
    }

    #[test]
    fn eval_mse_of_known_optimum_is_below_threshold() {
        // Router: threshold at x = 0.5 (sigma(20x - 10)); experts equal the
        // two target segments. MSE is then the observation noise, ~0.01.
        let params = MoeParams {
            router_w: 20.0,
            router_b: -10.0,
            experts: [[0.8, -0.2], [-2.0, 2.0]],
        };
        let mut below = 0;
        for seed in 0..10 {
            let data = gen_dataset(seed);
            if eval_mse(&params, &data) < 0.02 {
                below += 1;
            }
        }
        assert!(below >= 9, "known optimum below threshold on only {below}/10 seeds");
    }

    #[test]
    fn eval_mse_with_zero_experts_equals_mean_y_squared() {
        let params = MoeParams { router_w: 0.0, router_b: 0.0, experts: [[0.0; 2]; 2] };
        let data = gen_dataset(0);
        let expected = data.y.iter().map(|y| y * y).sum::<f64>() / data.len() as f64;
        assert!((eval_mse(&params, &data) - expected).abs() < 1e-12);
    }
}
