#![no_main]

use ehpc_core::scenario::load_scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(scenario) = load_scenario(text) else {
        return;
    };
    // Anything accepted must survive a round trip unchanged.
    let again = load_scenario(&scenario.to_json()).expect("re-encoded scenario loads");
    assert_eq!(scenario, again);
});
