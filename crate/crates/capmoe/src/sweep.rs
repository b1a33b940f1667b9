//! Grid execution and CSV (de)serialization for sweep results.
//!
//! Cells run in parallel but records are emitted in deterministic grid
//! order (config estimator order, then temperature, then seed), so two runs
//! of the same configuration produce byte-identical CSV.

use crate::config::{Estimator, ExperimentConfig};
use crate::error::{Error, Result};
use crate::train::train_cell;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One grid cell's summary; the serialized field order is the CSV column
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub estimator: String,
    pub tau: f64,
    pub seed: u64,
    pub balance_weight: f64,
    pub use_sinkhorn: bool,
    pub use_iw: bool,
    /// Final argmax-routing MSE; NaN marks a failed cell.
    pub final_mse: f64,
    pub success: bool,
    /// Largest importance weight seen over all steps.
    pub max_iw: f64,
    pub mean_skip_fraction: f64,
    /// Internal diagnostic; not a CSV column.
    #[serde(skip)]
    pub mean_sinkhorn_iterations: f64,
}

/// The deterministic cell order of a sweep.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<(Estimator, f64, u64)> {
    let mut cells = Vec::new();
    for &estimator in &cfg.estimators {
        for &tau in &cfg.temperatures {
            for &seed in &cfg.seeds {
                cells.push((estimator, tau, seed));
            }
        }
    }
    cells
}

/// Trains every cell of the grid. Results are ordered by [`grid_cells`]
/// regardless of completion order; `cfg.workers` bounds parallelism
/// (0 = one worker per CPU).
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let cells = grid_cells(cfg);
    let run = |cell: &(Estimator, f64, u64)| train_cell(cell.0, cell.1, cell.2, cfg);
    let records = if cfg.workers == 1 {
        cells.iter().map(run).collect()
    } else if cfg.workers == 0 {
        cells.par_iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run).collect())
    };
    Ok(records)
}

/// Serializes records as CSV preceded by `# key = value` metadata lines
/// echoing the full configuration.
pub fn records_to_csv(records: &[RunRecord], cfg: &ExperimentConfig) -> Result<String> {
    let mut out = String::new();
    for line in cfg.to_kv_string().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for record in records {
        writer.serialize(record)?;
    }
    let bytes = writer.into_inner().expect("flushing to a Vec cannot fail");
    out.push_str(std::str::from_utf8(&bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Reads records back from [`records_to_csv`] output; `#` lines are
/// metadata comments.
pub fn records_from_csv(text: &str) -> Result<Vec<RunRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut records = Vec::new();
    for row in reader.deserialize() {
        records.push(row?);
    }
    Ok(records)
}
