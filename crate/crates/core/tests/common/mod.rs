#![allow(dead_code)]

use ehpc_core::Scenario;

pub struct Case {
    pub name: &'static str,
    pub scenario: Scenario,
}

fn case(name: &'static str, t: u32, b: f64, pairs: &[(f64, f64)]) -> Case {
    Case {
        name,
        scenario: Scenario::from_pairs(t, b, pairs).unwrap(),
    }
}

/// Bernoulli, semi-Bernoulli, 3- and 4-atom laws with T ∈ {1,2,4,8} and
/// capacities on both sides of the large-battery threshold.
pub fn matrix() -> Vec<Case> {
    vec![
        case("bern_T4_B10", 4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]),
        case("bern_at_Ec_T4_B10", 4, 10.0, &[(0.0, 0.5), (4.0, 0.5)]),
        case("bern_T8_B5", 8, 5.0, &[(0.0, 0.7), (3.0, 0.3)]),
        case("semi_T2_B8", 2, 8.0, &[(0.0, 0.5), (7.0, 0.3), (12.0, 0.2)]),
        case("two_atom_T2_B6", 2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]),
        case("three_atom_T8_B12", 8, 12.0, &[(0.5, 0.3), (2.0, 0.4), (6.0, 0.3)]),
        case(
            "four_atom_T4_B6",
            4,
            6.0,
            &[(0.0, 0.25), (1.0, 0.25), (3.0, 0.25), (8.0, 0.25)],
        ),
        case("three_atom_T1_B4", 1, 4.0, &[(0.0, 0.4), (2.0, 0.3), (5.0, 0.3)]),
        case(
            "four_atom_T2_B3",
            2,
            3.0,
            &[(0.2, 0.1), (1.0, 0.4), (2.5, 0.3), (4.0, 0.2)],
        ),
        case("large_T3_B5", 3, 5.0, &[(0.0, 0.5), (2.0, 0.5)]),
        case("large_T2_B20", 2, 20.0, &[(1.0, 0.2), (3.0, 0.5), (4.0, 0.3)]),
    ]
}

/// `E[min(E, x)]` summed directly over the loaded atoms after clipping.
pub fn truncated_mean(s: &Scenario, x: f64) -> f64 {
    s.arrivals()
        .atoms()
        .iter()
        .map(|a| a.prob * a.value.min(s.battery()).min(x))
        .sum()
}

/// Root of `B̄ − Tx + (T−1)E[min(E,x)]` by scanning `n` grid points and
/// interpolating linearly inside the bracketing cell.
pub fn grid_scan_root(s: &Scenario, n: usize) -> f64 {
    let t = s.t();
    let b = s.battery();
    let f = |x: f64| b - t * x + (t - 1.0) * truncated_mean(s, x);
    let h = b / n as f64;
    let mut prev = f(0.0);
    for i in 1..=n {
        let x = i as f64 * h;
        let cur = f(x);
        if cur <= 0.0 {
            if cur == 0.0 {
                return x;
            }
            return x - h + h * prev / (prev - cur);
        }
        prev = cur;
    }
    b
}

/// Random scenarios: `T ∈ 1..=8`, up to five atoms, capacities from well below
/// to well above the arrival range.
pub fn arb_scenario() -> impl proptest::strategy::Strategy<Value = Scenario> {
    use proptest::prelude::*;
    (
        1u32..=8,
        0.5f64..20.0,
        prop::collection::vec((0.0f64..25.0, 0.05f64..1.0), 1..=5),
        any::<bool>(),
    )
        .prop_map(|(t, b, raw, with_zero)| {
            let mut raw = raw;
            if with_zero {
                raw[0].0 = 0.0;
            }
            let total: f64 = raw.iter().map(|r| r.1).sum();
            let pairs: Vec<(f64, f64)> = raw.iter().map(|&(v, w)| (v, w / total)).collect();
            Scenario::from_pairs(t, b, &pairs).unwrap()
        })
}
