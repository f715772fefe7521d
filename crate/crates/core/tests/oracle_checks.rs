mod common;

use common::matrix;
use ehpc_core::oracle::{
    check_dominance, finite_horizon_value, modify_semi_bernoulli, reduced_reward, shape_defects,
    two_point_reduction, value_iterate, value_iterate_with_slack, GridSpec,
};
use ehpc_core::policies::PolicyKind;
use ehpc_core::rate::awgn_rate;
use ehpc_core::scenario::Atom;
use ehpc_core::simulator::{check_semi_bernoulli, monte_carlo, MonteCarloConfig};
use ehpc_core::solver::compute_params;
use ehpc_core::Scenario;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sc(t: u32, b: f64, pairs: &[(f64, f64)]) -> Scenario {
    Scenario::from_pairs(t, b, pairs).unwrap()
}

fn small_grid() -> GridSpec {
    GridSpec {
        n_battery: 65,
        n_action: 33,
        ..Default::default()
    }
}

#[test]
fn no_energy_no_throughput() {
    let s = sc(3, 5.0, &[(0.0, 1.0)]);
    assert_eq!(value_iterate(&s, &small_grid()).unwrap().theta_vi, 0.0);
}

#[test]
fn large_battery_gain_approaches_mean_rate() {
    let mut prev_gap = f64::INFINITY;
    for b in [5.0, 10.0, 20.0, 40.0] {
        let s = sc(3, b, &[(0.0, 0.5), (2.0, 0.5)]);
        let r = value_iterate_with_slack(&s, &small_grid().doubled()).unwrap();
        let gap = awgn_rate(1.0) - r.fine.theta_vi;
        assert!(gap > -r.delta_grid, "B={b}: gain above C(mu)");
        assert!(gap < prev_gap, "B={b}: gap {gap} did not shrink");
        prev_gap = gap;
    }
    assert!(prev_gap < 0.01);
}

#[test]
fn gain_does_not_depend_on_reference_state() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    let g = small_grid();
    let a = value_iterate(&s, &g).unwrap();
    let b = value_iterate(
        &s,
        &GridSpec {
            reference_state: (1, 17),
            ..g
        },
    )
    .unwrap();
    assert!((a.theta_vi - b.theta_vi).abs() <= g.vi_tolerance);
}

/// The doubling estimate is a heuristic, not a bound, so this only checks
/// that one more refinement stays far inside the 0.02-bit budget.
#[test]
fn further_refinement_stays_small() {
    for c in matrix() {
        let g = GridSpec {
            n_battery: 97,
            n_action: 49,
            ..Default::default()
        };
        let r = value_iterate_with_slack(&c.scenario, &g).unwrap();
        let finer = value_iterate(&c.scenario, &g.doubled().doubled()).unwrap();
        let step = (finer.theta_vi - r.fine.theta_vi).abs();
        assert!(step < 0.005 && r.delta_grid < 0.005, "{}: {step} {}", c.name, r.delta_grid);
        assert!(finer.theta_vi >= r.fine.theta_vi - 1e-6, "{}", c.name);
    }
}

#[test]
fn invalid_grid_rejected() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    assert!(value_iterate(&s, &GridSpec::with_battery_points(8)).is_err());
}

#[test]
fn iteration_cap_reports_span() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    let g = GridSpec {
        max_iterations: 1,
        ..small_grid()
    };
    assert!(value_iterate(&s, &g).is_err());
}

#[test]
fn worked_modification() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    let p = compute_params(&s);
    let m = modify_semi_bernoulli(&s, &p).unwrap();
    assert!((m.w_prob - 3.0 / 13.0).abs() < 1e-12);
    let expect = [(0.0, 5.0 / 13.0), (13.0 / 3.0, 3.0 / 26.0), (5.0, 0.5)];
    let atoms = m.dist().atoms();
    assert_eq!(atoms.len(), 3);
    for (a, &(v, pr)) in atoms.iter().zip(&expect) {
        assert!((a.value - v).abs() < 1e-12 && (a.prob - pr).abs() < 1e-12);
    }
    assert!((m.dist().mean() - 3.0).abs() < 1e-12);
    assert!((m.dist().tail_prob(p.e_c - 1e-9) - 8.0 / 13.0).abs() < 1e-12);
}

#[test]
fn modification_invariants_on_matrix() {
    for c in matrix() {
        let s = &c.scenario;
        let p = compute_params(s);
        let m = modify_semi_bernoulli(s, &p).unwrap();
        let d = m.dist();
        assert!((d.mean() - s.clipped().mean()).abs() < 1e-12, "{}", c.name);
        assert!(check_semi_bernoulli(&m.modified, p.e_c), "{}", c.name);
        if p.e_c > 0.0 {
            let at_least = d.tail_prob(p.e_c) + d.atoms().iter().filter(|a| a.value == p.e_c).map(|a| a.prob).sum::<f64>();
            assert!((at_least - p.q).abs() < 1e-12, "{}: {at_least} vs {}", c.name, p.q);
        }
        if check_semi_bernoulli(s, p.e_c) {
            let same: Vec<&Atom> = s.clipped().atoms().iter().filter(|a| a.prob > 0.0).collect();
            let got: Vec<&Atom> = d.atoms().iter().filter(|a| a.prob > 1e-15).collect();
            assert_eq!(same.len(), got.len(), "{}", c.name);
            for (x, y) in same.iter().zip(&got) {
                assert!((x.value - y.value).abs() < 1e-12 && (x.prob - y.prob).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn one_step_value_is_the_reward() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    let p = compute_params(&s);
    let t = finite_horizon_value(&s, s.clipped(), &p, 1, 65);
    for (&x, &j) in t.x.iter().zip(&t.j0) {
        assert_eq!(j, reduced_reward(&s, &p, x, false));
    }
    assert_eq!(t.recharge_continuation, 0.0);
}

#[test]
fn reward_is_concave_and_nondecreasing() {
    for c in matrix() {
        let s = &c.scenario;
        let p = compute_params(s);
        let n = 401;
        for flag in [false, true] {
            let lo = if flag { p.e_c } else { 0.0 };
            let v: Vec<f64> = (0..n)
                .map(|i| lo + (s.battery() - lo) * i as f64 / (n - 1) as f64)
                .map(|x| reduced_reward(s, &p, x, flag))
                .collect();
            let (convex, decrease) = shape_defects(&v);
            assert!(convex <= 1e-9 && decrease <= 1e-12, "{} s={flag}", c.name);
        }
    }
}

#[test]
fn modified_values_stay_concave_and_nondecreasing() {
    for c in matrix() {
        let s = &c.scenario;
        let p = compute_params(s);
        let m = modify_semi_bernoulli(s, &p).unwrap();
        for n in [1, 2, 4, 8] {
            let t = finite_horizon_value(s, m.dist(), &p, n, 513);
            let (convex, decrease) = shape_defects(&t.j0);
            assert!(convex <= 1e-9 && decrease <= 1e-12, "{} N={n}: {convex:e} {decrease:e}", c.name);
            let (convex, decrease) = shape_defects(&t.recharge_branch(s, &p, 257));
            assert!(convex <= 1e-9 && decrease <= 1e-12, "{} N={n} recharge", c.name);
        }
    }
}

#[test]
fn dominance_examples() {
    let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
    let p = compute_params(&s);
    assert!(check_dominance(&s, &p, 4, 513).unwrap().pass);
    assert_eq!(check_dominance(&s, &p, 1, 513).unwrap().max_violation, 0.0);

    let b = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
    let p = compute_params(&b);
    let r = check_dominance(&b, &p, 8, 513).unwrap();
    assert!(r.max_violation.abs() <= 1e-12);
}

#[test]
fn two_point_law_lower_bounds_concave_expectations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let lo = rng.gen_range(0.0..2.0);
        let hi = lo + rng.gen_range(0.5..5.0);
        let k = rng.gen_range(2..6);
        let mut w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= sum);
        let atoms: Vec<Atom> = w
            .iter()
            .map(|&pr| Atom::new(rng.gen_range(lo..=hi), pr))
            .collect();
        // Minimum of random affine pieces is concave.
        let pieces: Vec<(f64, f64)> = (0..rng.gen_range(1..6))
            .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0)))
            .collect();
        let f = |z: f64| pieces.iter().map(|&(a, b)| a * z + b).fold(f64::INFINITY, f64::min);
        let (p_lo, p_hi) = two_point_reduction(&atoms, lo, hi);
        let mean: f64 = atoms.iter().map(|a| a.prob * a.value).sum();
        assert!((p_lo * lo + p_hi * hi - mean).abs() < 1e-12);
        let ez: f64 = atoms.iter().map(|a| a.prob * f(a.value)).sum();
        assert!(ez >= p_lo * f(lo) + p_hi * f(hi) - 1e-12);
    }
}

/// Averaging `J_N(x(E₁), s(E₁))/N` over the first arrival must match
/// `N`-block simulations of Policy 1 started from a full battery.
#[test]
fn horizon_value_matches_simulation() {
    let n = 200;
    for c in matrix().into_iter().step_by(3) {
        let s = &c.scenario;
        let p = compute_params(s);
        let t = finite_horizon_value(s, s.clipped(), &p, n, 1025);
        let (b, tt) = (s.battery(), s.t());
        let j: f64 = s
            .clipped()
            .atoms()
            .iter()
            .map(|a| a.prob * t.value(s, &p, (b + (tt - 1.0) * a.value) / tt, a.value > p.e_c))
            .sum::<f64>()
            / n as f64;
        let cfg = MonteCarloConfig {
            n_blocks: n as u64,
            reps: 2_000,
            base_seed: 0,
            burn_in_blocks: 0,
        };
        let m = monte_carlo(PolicyKind::BlockFfp, s, &cfg).unwrap();
        assert!((j - m.mean).abs() < 3.0 * m.stderr + 1e-3, "{}: {j} vs {}", c.name, m.mean);
    }
}
