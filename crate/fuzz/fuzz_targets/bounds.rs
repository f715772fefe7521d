#![no_main]

use ehpc_core::scenario::load_scenario;
use ehpc_core::solver::{bounds_report, compute_params};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(scenario) = load_scenario(text) else {
        return;
    };
    let params = compute_params(&scenario);
    assert!(params.e_c >= 0.0 && params.e_c <= scenario.battery() * (1.0 + 1e-12));
    let r = bounds_report(&scenario);
    assert!(r.theta_bar.is_finite());
    assert!(r.throughput_lower <= r.throughput_upper + 1e-9);
    assert!(r.capacity_lower <= r.capacity_upper + 1e-9);
});
