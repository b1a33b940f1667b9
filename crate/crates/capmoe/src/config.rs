//! Experiment configuration: the estimator roster, the sweep grid, and a
//! flat `key = value` config-file format with documented defaults.

use crate::error::{Error, Result};

/// The trainable estimators. The first six are the REINFORCE family (with
/// and without skip reweighting, balanced sampling, and importance weights),
/// `gating` is the differentiable-gating scheme, and `exact` trains with the
/// closed-form oracle gradient as a no-sampling reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Estimator {
    /// Unconstrained independent sampling; no capacity limit.
    Sample,
    /// Independent sampling, drop over-capacity datapoints, average the
    /// kept ones (biased: no skip reweighting).
    SampleSkip,
    /// Independent sampling, drop over-capacity datapoints, reweight kept
    /// ones by `n_j / min(n_j, c)` (unbiased).
    SampleSkipIw,
    /// Balanced sampling, no importance weights (biased).
    GumbelMatching,
    /// Balanced sampling with conditional importance weights (unbiased).
    GumbelMatchingIw,
    /// Balanced sampling with Sinkhorn-marginal importance weights (biased).
    GumbelMatchingSh,
    /// Differentiable gating: expert output scaled by router probability.
    Gating,
    /// Oracle exact gradient; no sampling. Reference for solvability.
    Exact,
}

impl Estimator {
    /// Every runnable estimator, in canonical order.
    pub const ROSTER: [Estimator; 8] = [
        Estimator::Sample,
        Estimator::SampleSkip,
        Estimator::SampleSkipIw,
        Estimator::GumbelMatching,
        Estimator::GumbelMatchingIw,
        Estimator::GumbelMatchingSh,
        Estimator::Gating,
        Estimator::Exact,
    ];

    /// Stable configuration/CSV name.
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Sample => "sample",
            Estimator::SampleSkip => "sample_skip",
            Estimator::SampleSkipIw => "sample_skip_iw",
            Estimator::GumbelMatching => "gumbel_matching",
            Estimator::GumbelMatchingIw => "gumbel_matching_iw",
            Estimator::GumbelMatchingSh => "gumbel_matching_sh",
            Estimator::Gating => "gating",
            Estimator::Exact => "exact",
        }
    }

    /// Inverse of [`Estimator::name`].
    pub fn parse(s: &str) -> Result<Self> {
        Estimator::ROSTER
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                let roster: Vec<&str> = Estimator::ROSTER.iter().map(|e| e.name()).collect();
                Error::Config(format!(
                    "unknown estimator '{s}' (expected one of: {})",
                    roster.join(", ")
                ))
            })
    }

    /// True for the variants whose gradient is biased by construction
    /// (missing reweighting, missing importance weights, marginal instead of
    /// conditional proposals, or gating).
    pub fn is_biased(&self) -> bool {
        match self {
            Estimator::Sample | Estimator::SampleSkipIw | Estimator::GumbelMatchingIw => false,
            Estimator::Exact => false,
            Estimator::SampleSkip
            | Estimator::GumbelMatching
            | Estimator::GumbelMatchingSh
            | Estimator::Gating => true,
        }
    }

    /// True when the estimator samples balanced assignments.
    pub fn uses_balanced_sampling(&self) -> bool {
        matches!(
            self,
            Estimator::GumbelMatching
                | Estimator::GumbelMatchingIw
                | Estimator::GumbelMatchingSh
                | Estimator::Gating
        )
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full sweep configuration. One training run executes per
/// `(estimator, temperature, seed)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Estimators to sweep.
    pub estimators: Vec<Estimator>,
    /// Sampling temperatures to sweep; all positive.
    pub temperatures: Vec<f64>,
    /// Seeds to sweep; each seed fixes its dataset, init, and sampling noise.
    pub seeds: Vec<u64>,
    /// Adam steps per run.
    pub steps: usize,
    /// Adam learning rate.
    pub learning_rate: f64,
    /// Load-balance loss weight (used by `gating`; the sweep values of
    /// interest are 0, 0.01, 0.03, and 0.1).
    pub balance_weight: f64,
    /// Apply Sinkhorn balancing to the tempered proposal before sampling;
    /// importance weights then account for the balanced proposal.
    pub use_sinkhorn_proposal: bool,
    /// Apply importance-weight ratios `p/q`; disabling them yields the
    /// deliberately biased no-importance-weight variants.
    pub use_importance_weights: bool,
    /// EMA decay of the REINFORCE baseline.
    pub baseline_decay: f64,
    /// Success threshold on the final argmax-routing MSE.
    pub success_threshold: f64,
    /// Parallel worker count for grid cells; 0 means one per CPU.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            estimators: vec![
                Estimator::Sample,
                Estimator::SampleSkip,
                Estimator::SampleSkipIw,
                Estimator::GumbelMatching,
                Estimator::GumbelMatchingIw,
                Estimator::GumbelMatchingSh,
            ],
            temperatures: vec![0.03, 0.1, 0.3, 1.0, 3.0, 10.0],
            seeds: (0..10).collect(),
            steps: 10_000,
            learning_rate: 0.1,
            balance_weight: 0.0,
            use_sinkhorn_proposal: false,
            use_importance_weights: true,
            baseline_decay: 0.99,
            success_threshold: 0.02,
            workers: 0,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("key '{key}': '{value}' is not a number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected 'true' or 'false', got '{value}'"
        ))),
    }
}

fn parse_list<T, F>(key: &str, value: &str, f: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    if value.trim().is_empty() {
        return Err(Error::Config(format!("key '{key}': list must not be empty")));
    }
    value.split(',').map(|item| f(item.trim())).collect()
}

impl ExperimentConfig {
    /// Applies one `key = value` pair. Unknown keys are errors.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "estimators" => {
                self.estimators = parse_list(key, value, Estimator::parse)?;
            }
            "temperatures" => {
                self.temperatures = parse_list(key, value, |v| parse_f64(key, v))?;
            }
            "seeds" => {
                self.seeds = parse_list(key, value, |v| {
                    v.parse::<u64>().map_err(|_| {
                        Error::Config(format!("key '{key}': '{v}' is not a seed"))
                    })
                })?;
            }
            "steps" => {
                self.steps = value.parse::<usize>().map_err(|_| {
                    Error::Config(format!("key '{key}': '{value}' is not a count"))
                })?;
            }
            "learning_rate" => self.learning_rate = parse_f64(key, value)?,
            "balance_weight" => self.balance_weight = parse_f64(key, value)?,
            "use_sinkhorn_proposal" => self.use_sinkhorn_proposal = parse_bool(key, value)?,
            "use_importance_weights" => self.use_importance_weights = parse_bool(key, value)?,
            "baseline_decay" => self.baseline_decay = parse_f64(key, value)?,
            "success_threshold" => self.success_threshold = parse_f64(key, value)?,
            "workers" => {
                self.workers = value.parse::<usize>().map_err(|_| {
                    Error::Config(format!("key '{key}': '{value}' is not a count"))
                })?;
            }
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Checks every invariant the sweep relies on.
    pub fn validate(&self) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("estimators must not be empty".into()));
        }
        if self.temperatures.is_empty() {
            return Err(Error::Config("temperatures must not be empty".into()));
        }
        for &t in &self.temperatures {
            if !(t > 0.0) || !t.is_finite() {
                return Err(Error::Config(format!("temperatures must be positive, got {t}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.balance_weight >= 0.0) || !self.balance_weight.is_finite() {
            return Err(Error::Config(format!(
                "balance_weight must be non-negative, got {}",
                self.balance_weight
            )));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!(
                "baseline_decay must be in [0, 1), got {}",
                self.baseline_decay
            )));
        }
        if !(self.success_threshold > 0.0) || !self.success_threshold.is_finite() {
            return Err(Error::Config(format!(
                "success_threshold must be positive, got {}",
                self.success_threshold
            )));
        }
        Ok(())
    }

    /// Serializes the full configuration as `key = value` lines in canonical
    /// order. `parse_config` of the output reproduces the config exactly.
    pub fn to_kv_string(&self) -> String {
        let estimators: Vec<&str> = self.estimators.iter().map(|e| e.name()).collect();
        let temperatures: Vec<String> =
            self.temperatures.iter().map(|t| t.to_string()).collect();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        format!(
            "estimators = {}\ntemperatures = {}\nseeds = {}\nsteps = {}\nlearning_rate = {}\n\
             balance_weight = {}\nuse_sinkhorn_proposal = {}\nuse_importance_weights = {}\n\
             baseline_decay = {}\nsuccess_threshold = {}\nworkers = {}\n",
            estimators.join(","),
            temperatures.join(","),
            seeds.join(","),
            self.steps,
            self.learning_rate,
            self.balance_weight,
            self.use_sinkhorn_proposal,
            self.use_importance_weights,
            self.baseline_decay,
            self.success_threshold,
            self.workers,
        )
    }
}

/// Parses the flat config format: one `key = value` per line, `#` starts a
/// comment line, blank lines ignored, later keys win. Every key has a
/// default, so an empty file is the default configuration.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
        })?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}
