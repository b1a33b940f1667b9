//! Deterministic SVG plots of sweep results: per estimator variant, final
//! MSE versus temperature on log-log axes, per-seed points plus a median
//! curve and a dashed success-threshold line.
//!
//! Plots are a pure function of the CSV record fields, so regenerating from
//! a results file reproduces the bytes exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::sweep::RunRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 56.0;

/// Floor for plotted MSE values so zero stays on the log axis.
const MSE_FLOOR: f64 = 1e-12;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    estimator: String,
    balance_bits: u64,
    use_sinkhorn: bool,
    use_iw: bool,
}

fn group_records(records: &[RunRecord]) -> BTreeMap<GroupKey, Vec<&RunRecord>> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = GroupKey {
            estimator: r.estimator.clone(),
            balance_bits: r.balance_weight.to_bits(),
            use_sinkhorn: r.use_sinkhorn,
            use_iw: r.use_iw,
        };
        groups.entry(key).or_default().push(r);
    }
    groups
}

/// Median with failed cells (NaN) treated as +infinity; the plot clamps the
/// result to the top edge.
fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| {
        let a = if a.is_nan() { f64::INFINITY } else { *a };
        let b = if b.is_nan() { f64::INFINITY } else { *b };
        a.partial_cmp(&b).expect("infinities are comparable")
    });
    let n = values.len();
    let mid = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    if n % 2 == 1 {
        mid(values[n / 2])
    } else {
        let a = mid(values[n / 2 - 1]);
        let b = mid(values[n / 2]);
        if a.is_infinite() || b.is_infinite() {
            f64::INFINITY
        } else {
            0.5 * (a + b)
        }
    }
}

struct LogAxis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl LogAxis {
    fn new(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v.is_finite() && v > 0.0 {
                lo = lo.min(v.log10());
                hi = hi.max(v.log10());
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = -1.0;
            hi = 1.0;
        }
        let mut lo = lo.floor();
        let mut hi = hi.ceil();
        if hi - lo < 1.0 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi, px_lo, px_hi }
    }

    fn place(&self, value: f64) -> f64 {
        let v = value.max(MSE_FLOOR).log10().clamp(self.lo, self.hi);
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn decade_ticks(&self) -> Vec<i32> {
        (self.lo.ceil() as i32..=self.hi.floor() as i32).collect()
    }
}

fn tick_label(power: i32) -> String {
    if (-4..=4).contains(&power) {
        let v = 10f64.powi(power);
        format!("{v}")
    } else {
        format!("1e{power}")
    }
}

fn svg_for_group(key: &GroupKey, records: &[&RunRecord], threshold: f64) -> String {
    let xs = LogAxis::new(
        records.iter().map(|r| r.tau),
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT,
    );
    // The y axis covers the data and the threshold; pixel origin is at the
    // top, so the pixel range is inverted.
    let ys = LogAxis::new(
        records
            .iter()
            .map(|r| r.final_mse)
            .chain(std::iter::once(threshold)),
        HEIGHT - MARGIN_BOTTOM,
        MARGIN_TOP,
    );

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    let balance = f64::from_bits(key.balance_bits);
    let title = format!(
        "{} (balance={}, sinkhorn={}, iw={})",
        key.estimator, balance, key.use_sinkhorn, key.use_iw
    );
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"15\">{title}</text>\n",
        WIDTH / 2.0
    ));

    // Gridlines and tick labels.
    for p in xs.decade_ticks() {
        let x = xs.place(10f64.powi(p));
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 18.0,
            tick_label(p)
        ));
    }
    for p in ys.decade_ticks() {
        let y = ys.place(10f64.powi(p));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"12\">{}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0,
            tick_label(p)
        ));
    }

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" \
         stroke-width=\"1.5\"/>\n",
        MARGIN_LEFT,
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" \
         stroke-width=\"1.5\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">temperature</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 14.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\" transform=\"rotate(-90 18 {:.2})\">final MSE</text>\n",
        (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
        (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0
    ));

    // Dashed success threshold.
    let ty = ys.place(threshold);
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{ty:.2}\" x2=\"{:.2}\" y2=\"{ty:.2}\" stroke=\"black\" \
         stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>\n",
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"start\" font-family=\"sans-serif\" \
         font-size=\"11\">{threshold}</text>\n",
        WIDTH - MARGIN_RIGHT - 34.0,
        ty - 5.0
    ));

    // Per-seed points; failed cells (NaN) sit hollow at the top edge.
    let mut by_tau: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_tau.entry(r.tau.to_bits()).or_default().push(r.final_mse);
        let x = xs.place(r.tau);
        if r.final_mse.is_nan() {
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"none\" \
                 stroke=\"#b22222\" stroke-width=\"1.4\"/>\n",
                MARGIN_TOP
            ));
        } else {
            let y = ys.place(r.final_mse);
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#4682b4\" \
                 fill-opacity=\"0.55\"/>\n"
            ));
        }
    }

    // Median curve over seeds per temperature.
    let mut path_points = Vec::new();
    for (tau_bits, mses) in &by_tau {
        let tau = f64::from_bits(*tau_bits);
        let mut values = mses.clone();
        let med = median(&mut values);
        let y = if med.is_infinite() { MARGIN_TOP } else { ys.place(med) };
        path_points.push((xs.place(tau), y));
    }
    if path_points.len() == 1 {
        let (x, y) = path_points[0];
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4.5\" fill=\"none\" stroke=\"#1f3f5f\" \
             stroke-width=\"2\"/>\n"
        ));
    } else if path_points.len() > 1 {
        let points: Vec<String> =
            path_points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f3f5f\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

fn file_stem(key: &GroupKey) -> String {
    let balance = f64::from_bits(key.balance_bits);
    format!(
        "mse_{}_bw{}_sh{}_iw{}",
        key.estimator,
        balance,
        u8::from(key.use_sinkhorn),
        u8::from(key.use_iw)
    )
}

/// Writes one SVG per (estimator, balance_weight, use_sinkhorn, use_iw)
/// group into `out_dir` and returns the paths in deterministic order.
pub fn emit_plots(records: &[RunRecord], out_dir: &Path, threshold: f64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (key, group) in group_records(records) {
        let svg = svg_for_group(&key, &group, threshold);
        let path = out_dir.join(format!("{}.svg", file_stem(&key)));
        std::fs::write(&path, svg)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Renders the SVG for every group without touching the filesystem; used by
/// tests and for determinism checks.
pub fn render_plots(records: &[RunRecord], threshold: f64) -> Vec<(String, String)> {
    group_records(records)
        .iter()
        .map(|(key, group)| (file_stem(key), svg_for_group(key, group, threshold)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(estimator: &str, tau: f64, seed: u64, mse: f64) -> RunRecord {
        RunRecord {
            estimator: estimator.into(),
            tau,
            seed,
            balance_weight: 0.0,
            use_sinkhorn: false,
            use_iw: true,
            final_mse: mse,
            success: mse < 0.02,
            max_iw: 1.0,
            mean_skip_fraction: 0.0,
            mean_sinkhorn_iterations: 0.0,
        }
    }

    #[test]
    fn single_record_renders_point_and_threshold() {
        let plots = render_plots(&[record("sample", 1.0, 0, 0.05)], 0.02);
        assert_eq!(plots.len(), 1);
        let svg = &plots[0].1;
        assert!(svg.contains("stroke-dasharray"));
        assert!(svg.contains("<circle"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let records: Vec<RunRecord> = (0..10)
            .flat_map(|seed| {
                [0.1, 1.0, 10.0].map(|tau| {
                    record("sample", tau, seed, 0.01 * (seed as f64 + 1.0) * tau)
                })
            })
            .collect();
        let a = render_plots(&records, 0.02);
        let b = render_plots(&records, 0.02);
        assert_eq!(a, b);
    }

    #[test]
    fn groups_split_by_variant_flags() {
        let mut r1 = record("gating", 1.0, 0, 0.1);
        r1.balance_weight = 0.01;
        let r2 = record("gating", 1.0, 0, 0.1);
        let plots = render_plots(&[r1, r2], 0.02);
        assert_eq!(plots.len(), 2);
        assert_ne!(plots[0].0, plots[1].0);
    }

    #[test]
    fn nan_cells_render_as_failures_at_top_edge() {
        let plots = render_plots(
            &[record("sample", 1.0, 0, f64::NAN), record("sample", 1.0, 1, 0.01)],
            0.02,
        );
        assert!(plots[0].1.contains("#b22222"));
    }

    #[test]
    fn median_handles_nan_and_even_counts() {
        let mut v = vec![0.3, f64::NAN, 0.1];
        assert_eq!(median(&mut v), 0.3);
        let mut v = vec![0.4, 0.2];
        assert!((median(&mut v) - 0.3).abs() < 1e-15);
        let mut v = vec![f64::NAN, 0.2];
        assert!(median(&mut v).is_infinite());
    }

    #[test]
    fn emit_writes_files() {
        let dir = std::env::temp_dir().join("capmoe_plot_test");
        let _ = std::fs::remove_dir_all(&dir);
        let paths =
            emit_plots(&[record("sample", 1.0, 0, 0.05)], &dir, 0.02).unwrap();
        assert_eq!(paths.len(), 1);
        assert!(paths[0].exists());
        let body = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(body.contains("</svg>"));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn plots_are_pure_functions_of_csv_fields() {
        use crate::config::ExperimentConfig;
        let records: Vec<RunRecord> = (0..4)
            .map(|seed| {
                let mut r = record("sample", 1.0 + seed as f64, seed, 0.05);
                r.mean_sinkhorn_iterations = seed as f64;
                r
            })
            .collect();
        let direct = render_plots(&records, 0.02);
        let csv =
            crate::sweep::records_to_csv(&records, &ExperimentConfig::default()).unwrap();
        let round_tripped = crate::sweep::records_from_csv(&csv).unwrap();
        let regenerated = render_plots(&round_tripped, 0.02);
        assert_eq!(direct, regenerated);
    }
}
