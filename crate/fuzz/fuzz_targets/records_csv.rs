//! Fuzzes the results-CSV reader: arbitrary input must either fail with an
//! error or produce records that survive a serialize/parse cycle (allowing
//! for NaN cells, which compare unequal to themselves).

#![no_main]

use libfuzzer_sys::fuzz_target;

fn nan_eq(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = capmoe::sweep::records_from_csv(text) else { return };
    let cfg = capmoe::config::ExperimentConfig::default();
    let csv = capmoe::sweep::records_to_csv(&records, &cfg).expect("records must serialize");
    let again = capmoe::sweep::records_from_csv(&csv).expect("own output must parse");
    assert_eq!(again.len(), records.len());
    for (a, b) in records.iter().zip(&again) {
        assert_eq!(a.estimator, b.estimator);
        assert!(nan_eq(a.tau, b.tau));
        assert_eq!(a.seed, b.seed);
        assert!(nan_eq(a.balance_weight, b.balance_weight));
        assert_eq!(a.use_sinkhorn, b.use_sinkhorn);
        assert_eq!(a.use_iw, b.use_iw);
        assert!(nan_eq(a.final_mse, b.final_mse));
        assert_eq!(a.success, b.success);
        assert!(nan_eq(a.max_iw, b.max_iw));
        assert!(nan_eq(a.mean_skip_fraction, b.mean_skip_fraction));
    }
});
