use std::path::Path;

use ehpc_core::scenario::load_scenario;
use ehpc_core::solver::bounds_report;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn loader_seeds_replay() {
    let seeds = seeds("load_scenario");
    assert!(seeds.len() >= 10);
    let mut accepted = 0;
    for (name, text) in &seeds {
        if let Ok(s) = load_scenario(text) {
            accepted += 1;
            assert_eq!(load_scenario(&s.to_json()).unwrap(), s, "{name}");
        }
    }
    assert!(accepted >= 7 && accepted < seeds.len());
}

#[test]
fn bounds_seeds_replay() {
    for (name, text) in seeds("bounds") {
        let Ok(s) = load_scenario(&text) else { continue };
        let r = bounds_report(&s);
        assert!(r.theta_bar.is_finite(), "{name}");
        assert!(r.throughput_lower <= r.throughput_upper + 1e-9, "{name}");
        assert!(r.capacity_lower <= r.capacity_upper + 1e-9, "{name}");
    }
}
