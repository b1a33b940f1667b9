//! Command-line harness: training sweeps, plot regeneration, brute-force
//! oracle reports, and gradient checks.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use capmoe::config::{parse_config, ExperimentConfig};
use capmoe::oracle;
use capmoe::plot::emit_plots;
use capmoe::sweep::{records_from_csv, records_to_csv, run_grid};

#[derive(Parser)]
#[command(
    name = "capmoe",
    version,
    about = "Gradient estimators for mixture-of-experts routing under expert capacity limits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training sweep and write a results CSV.
    Sweep(Box<SweepArgs>),
    /// Regenerate plots from a results CSV.
    Plot(PlotArgs),
    /// Run brute-force oracle checks and write report CSVs.
    Oracle(OracleArgs),
    /// Check analytic model gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

/// Config values come from defaults, then the `--config` file, then these
/// flags; each flag accepts the same syntax as its config-file key.
#[derive(Args)]
struct SweepArgs {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Results CSV path.
    #[arg(long, default_value = "results.csv")]
    output: PathBuf,
    /// Also write SVG plots into this directory.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    /// Comma-separated estimator names.
    #[arg(long)]
    estimators: Option<String>,
    /// Comma-separated positive temperatures.
    #[arg(long)]
    temperatures: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Adam steps per run.
    #[arg(long)]
    steps: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    learning_rate: Option<String>,
    /// Load-balance loss weight.
    #[arg(long)]
    balance_weight: Option<String>,
    /// true/false: Sinkhorn-balance the proposal before sampling.
    #[arg(long)]
    use_sinkhorn_proposal: Option<String>,
    /// true/false: apply importance-weight ratios.
    #[arg(long)]
    use_importance_weights: Option<String>,
    /// EMA baseline decay.
    #[arg(long)]
    baseline_decay: Option<String>,
    /// Success threshold on final MSE.
    #[arg(long)]
    success_threshold: Option<String>,
    /// Parallel workers (0 = one per CPU).
    #[arg(long)]
    workers: Option<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// Results CSV produced by `sweep`.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for SVG files.
    #[arg(long, default_value = "plots")]
    out_dir: PathBuf,
    /// Dashed success-threshold line.
    #[arg(long, default_value_t = 0.02)]
    threshold: f64,
}

#[derive(Args)]
struct OracleArgs {
    /// Output directory for report CSVs.
    #[arg(long, default_value = "oracle_reports")]
    out_dir: PathBuf,
    /// Monte-Carlo draws per unbiasedness configuration.
    #[arg(long, default_value_t = 20_000)]
    draws: usize,
    /// Deliberately break the skip estimator's reweighting to confirm the
    /// unbiasedness check fails (exits nonzero).
    #[arg(long)]
    inject_bias: bool,
    /// Base seed for all checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random parameter configurations.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    /// Central finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Maximum relative error accepted.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Seed for the random configurations.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn sweep(args: &SweepArgs) -> anyhow::Result<bool> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    let overrides: [(&str, &Option<String>); 11] = [
        ("estimators", &args.estimators),
        ("temperatures", &args.temperatures),
        ("seeds", &args.seeds),
        ("steps", &args.steps),
        ("learning_rate", &args.learning_rate),
        ("balance_weight", &args.balance_weight),
        ("use_sinkhorn_proposal", &args.use_sinkhorn_proposal),
        ("use_importance_weights", &args.use_importance_weights),
        ("baseline_decay", &args.baseline_decay),
        ("success_threshold", &args.success_threshold),
        ("workers", &args.workers),
    ];
    for (key, value) in overrides {
        if let Some(value) = value {
            cfg.apply_kv(key, value)?;
        }
    }
    cfg.validate()?;

    let records = run_grid(&cfg)?;
    let csv = records_to_csv(&records, &cfg)?;
    if let Some(dir) = args.output.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&args.output, &csv)
        .with_context(|| format!("writing {}", args.output.display()))?;
    let successes = records.iter().filter(|r| r.success).count();
    println!(
        "wrote {} records to {} ({successes} under the {} threshold)",
        records.len(),
        args.output.display(),
        cfg.success_threshold
    );
    if let Some(dir) = &args.plot_dir {
        let paths = emit_plots(&records, dir, cfg.success_threshold)?;
        println!("wrote {} plots to {}", paths.len(), dir.display());
    }
    Ok(true)
}

fn plot(args: &PlotArgs) -> anyhow::Result<bool> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let records = records_from_csv(&text)?;
    if records.is_empty() {
        bail!("{} contains no records", args.input.display());
    }
    let paths = emit_plots(&records, &args.out_dir, args.threshold)?;
    println!("wrote {} plots to {}", paths.len(), args.out_dir.display());
    Ok(true)
}

fn oracle_suite(args: &OracleArgs) -> anyhow::Result<bool> {
    let outcome = oracle::run_oracle_suite(args.draws, args.inject_bias, args.seed)?;
    let paths = oracle::write_oracle_reports(&outcome, &args.out_dir)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    println!(
        "solver: {} instances, {} value failures, {} conditional failures (max gaps {:.3e} / {:.3e})",
        outcome.solver.instances,
        outcome.solver.value_failures,
        outcome.solver.conditional_failures,
        outcome.solver.max_value_gap,
        outcome.solver.max_conditional_gap,
    );
    println!(
        "unbiasedness: {:.1}% of {} components within 3 standard errors",
        100.0 * outcome.unbiasedness_pass_fraction,
        outcome.unbiasedness.len()
    );
    for (tau, report) in &outcome.marginals {
        println!(
            "marginals tau={tau}: |gm-gibbs| {:.4}, |sinkhorn-gm| {:.4}, |softmax-gm| {:.4}, tv {:.4}",
            report.max_abs_gm_vs_gibbs,
            report.max_abs_sinkhorn_vs_gm,
            report.max_abs_softmax_vs_gm,
            report.tv_gibbs_vs_empirical,
        );
    }
    if !outcome.pass {
        eprintln!("oracle suite FAILED");
    }
    Ok(outcome.pass)
}

fn gradcheck(args: &GradcheckArgs) -> anyhow::Result<bool> {
    let outcome = oracle::gradcheck(args.configs, args.step, args.tolerance, args.seed);
    println!(
        "gradcheck: max relative error {:.3e} over {} configurations (tolerance {:.0e})",
        outcome.max_rel_error, outcome.configs, outcome.tolerance
    );
    if !outcome.pass {
        eprintln!("gradcheck FAILED");
    }
    Ok(outcome.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sweep(args) => sweep(args),
        Command::Plot(args) => plot(args),
        Command::Oracle(args) => oracle_suite(args),
        Command::Gradcheck(args) => gradcheck(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
