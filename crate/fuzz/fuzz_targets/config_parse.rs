//! Fuzzes the key-value config parser: arbitrary input must either fail
//! with an error or produce a validated config whose canonical form
//! round-trips exactly.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = capmoe::config::parse_config(text) else { return };
    // parse_config validates internally, so anything it accepts must
    // serialize to a canonical form that parses back to the same config.
    let canonical = cfg.to_kv_string();
    let again = capmoe::config::parse_config(&canonical).expect("canonical form must parse");
    assert_eq!(again, cfg);
});
