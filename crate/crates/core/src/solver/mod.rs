//! Parameters of the block fixed-fraction policy and the closed-form bounds.

mod kkt;

pub use kkt::{verify_kkt, AscentCheck, KktCertificate, KktPoint, UpperBoundProgram};

use serde::Serialize;
use thiserror::Error;

use crate::rate::{awgn_rate, capacity_gap_constant, HALF_LOG2_E};
use crate::scenario::{DiscreteDistribution, Scenario};

/// Absolute tolerance of the bisection for `E_c`.
pub const ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    /// `Pr(E > E_c) = 0`: the battery never regenerates, epochs are infinite.
    #[error("no regeneration: Pr(E > E_c) = 0")]
    NoRegeneration,
}

/// Solved parameters driving the block fixed-fraction policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyParams {
    pub e_c: f64,
    pub q: f64,
    /// `Pr(E > E_c)` under the clipped law.
    pub p: f64,
    /// `Pr(E > B̄)` under the law as loaded.
    pub p_prime: f64,
    /// `E[E | E ≤ E_c]`, zero when that event has no mass.
    pub mu_tilde: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub tau: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub theta_bar: f64,
    pub throughput_lower: f64,
    pub throughput_upper: f64,
    pub capacity_lower: f64,
    /// `θ̄ − H/T − ½·log₂(πe²/2)` before clamping at zero.
    pub capacity_lower_unclamped: f64,
    pub capacity_upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kkt: Option<KktCertificate>,
}

/// `f(x) = B̄ − T·x + (T−1)·E[min(E, x)]` on the clipped law.
pub fn critical_energy_residual(scenario: &Scenario, x: f64) -> f64 {
    let t = scenario.t();
    scenario.battery() - t * x + (t - 1.0) * scenario.clipped().truncated_mean(x)
}

/// Unique root of [`critical_energy_residual`] in `[0, B̄]`.
///
/// Bisection brackets the root to [`ROOT_TOL`]; because `f` is linear between
/// atoms the bracket is then replaced by the exact root of the linear piece
/// whenever that root falls inside it.
pub fn solve_critical_energy(scenario: &Scenario) -> f64 {
    let b = scenario.battery();
    if scenario.block_len() == 1 {
        return b;
    }
    let f = |x: f64| critical_energy_residual(scenario, x);
    // E_c ≥ B̄/T since E[min(E,x)] ≤ x.
    let (mut lo, mut hi) = (b / scenario.t(), b);
    if f(lo) <= 0.0 {
        return lo;
    }
    if f(hi) >= 0.0 {
        return hi;
    }
    while hi - lo > ROOT_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let root = polish_on_segment(scenario, mid, lo, hi).unwrap_or(mid);
    snap_to_atom(scenario.clipped(), root, b)
}

fn polish_on_segment(scenario: &Scenario, x: f64, lo: f64, hi: f64) -> Option<f64> {
    let t = scenario.t();
    let d = scenario.clipped();
    let below: f64 = d
        .atoms()
        .iter()
        .filter(|a| a.value <= x)
        .map(|a| a.prob * a.value)
        .sum();
    let tail = d.tail_prob(x);
    let denom = t - (t - 1.0) * tail;
    if denom <= 0.0 {
        return None;
    }
    let root = (scenario.battery() + (t - 1.0) * below) / denom;
    let slack = 4.0 * ROOT_TOL;
    (root >= lo - slack && root <= hi + slack).then_some(root)
}

fn snap_to_atom(d: &DiscreteDistribution, x: f64, scale: f64) -> f64 {
    let tol = ROOT_TOL * (1.0 + scale);
    d.atoms()
        .iter()
        .map(|a| a.value)
        .find(|v| (v - x).abs() <= tol)
        .unwrap_or(x)
}

/// Solves `E_c` and derives `q`, `p`, `p′` and `μ̃`.
pub fn compute_params(scenario: &Scenario) -> PolicyParams {
    let e_c = solve_critical_energy(scenario);
    params_for_critical_energy(scenario, e_c)
}

/// Parameters for a given critical level, without solving for it.
pub fn params_for_critical_energy(scenario: &Scenario, e_c: f64) -> PolicyParams {
    let d = scenario.clipped();
    let truncated = d.truncated_mean(e_c);
    let q = if e_c > 0.0 && truncated > 0.0 {
        (truncated / e_c).clamp(0.0, 1.0)
    } else {
        0.0
    };
    PolicyParams {
        e_c,
        q,
        p: d.tail_prob(e_c),
        p_prime: scenario.overflow_tail(),
        mu_tilde: d.conditional_mean_at_most(e_c),
    }
}

/// `B̄ / (q + T(1−q))`, which must agree with `E_c`.
pub fn critical_energy_from_q(scenario: &Scenario, q: f64) -> f64 {
    scenario.battery() / (q + scenario.t() * (1.0 - q))
}

pub fn epoch_stats(scenario: &Scenario, params: &PolicyParams) -> Result<EpochStats, SolverError> {
    if params.p <= 0.0 {
        return Err(SolverError::NoRegeneration);
    }
    let t = scenario.t();
    let k = 1.0 / params.p - 1.0;
    Ok(EpochStats {
        tau: 1.0 + t * k,
        eps: scenario.battery() + k * t * params.mu_tilde,
    })
}

/// Power spent in each of the first `T−1` slots when an arrival `v > E_c`
/// recharges the battery, `min(v − (B̄−v)/(T−1), B̄)`.
pub fn recharge_head_power(scenario: &Scenario, v: f64) -> f64 {
    let t = scenario.t();
    let b = scenario.battery();
    (v - (b - v) / (t - 1.0)).min(b)
}

/// Closed-form approximate throughput `θ̄` in bits per slot.
pub fn theta_bar(scenario: &Scenario, params: &PolicyParams) -> f64 {
    let t = scenario.t();
    let d = scenario.clipped();
    let head = if scenario.block_len() > 1 {
        let s: f64 = d
            .atoms()
            .iter()
            .filter(|a| a.value > params.e_c)
            .map(|a| a.prob * awgn_rate(recharge_head_power(scenario, a.value)))
            .sum();
        (t - 1.0) / t * s
    } else {
        0.0
    };
    let steady = (params.p + t * (1.0 - params.p)) / t * awgn_rate(d.truncated_mean(params.e_c));
    head + steady
}

/// `B̄ ≥ μ + T(E_max − μ)`, where `θ̄` collapses to `C(μ)`.
pub fn large_battery_threshold(scenario: &Scenario) -> f64 {
    // Raw law: above this capacity nothing is clipped anyway.
    let d = scenario.arrivals();
    let mu = d.mean();
    mu + scenario.t() * (d.max_value() - mu)
}

pub fn is_large_battery(scenario: &Scenario) -> bool {
    scenario.battery() >= large_battery_threshold(scenario)
}

fn report_from_theta(scenario: &Scenario, theta: f64) -> BoundsReport {
    let h = scenario.clipped().entropy_bits();
    let cap_lower = theta - h / scenario.t() - capacity_gap_constant();
    BoundsReport {
        theta_bar: theta,
        throughput_lower: theta - HALF_LOG2_E,
        throughput_upper: theta,
        capacity_lower: cap_lower.max(0.0),
        capacity_lower_unclamped: cap_lower,
        capacity_upper: theta,
        kkt: None,
    }
}

/// `θ̄` with the throughput bounds of the optimal online policy.
pub fn throughput_bounds(scenario: &Scenario) -> BoundsReport {
    let params = compute_params(scenario);
    report_from_theta(scenario, theta_bar(scenario, &params))
}

/// Same report; the capacity fields use the entropy of the clipped law.
pub fn capacity_bounds(scenario: &Scenario) -> BoundsReport {
    throughput_bounds(scenario)
}

/// Every bound plus the KKT certificate of the upper-bound program.
pub fn bounds_report(scenario: &Scenario) -> BoundsReport {
    let mut report = throughput_bounds(scenario);
    report.kkt = Some(verify_kkt(scenario));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::awgn_rate;

    fn sc(t: u32, b: f64, pairs: &[(f64, f64)]) -> Scenario {
        Scenario::from_pairs(t, b, pairs).unwrap()
    }

    #[test]
    fn bernoulli_critical_energy() {
        let s = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
        let p = compute_params(&s);
        assert!((p.e_c - 4.0).abs() < 1e-12);
        assert!((p.q - 0.5).abs() < 1e-12);
        assert_eq!(p.p, 0.5);
        assert_eq!(p.mu_tilde, 0.0);
    }

    #[test]
    fn single_slot_blocks() {
        let s = sc(1, 3.0, &[(1.0, 0.25), (2.0, 0.25), (7.0, 0.5)]);
        let p = compute_params(&s);
        assert_eq!(p.e_c, 3.0);
        assert_eq!(p.q, s.clipped().truncated_mean(3.0) / 3.0);
        assert_eq!(p.p_prime, 0.5);
    }

    #[test]
    fn worked_instance() {
        let s = sc(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]);
        let p = compute_params(&s);
        assert!((p.e_c - 13.0 / 3.0).abs() < 1e-12);
        assert!((p.q - 8.0 / 13.0).abs() < 1e-12);
        assert_eq!(p.mu_tilde, 1.0);
    }

    #[test]
    fn epochs() {
        let s = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
        let p = compute_params(&s);
        let e = epoch_stats(&s, &p).unwrap();
        assert!((e.tau - 5.0).abs() < 1e-12);
        assert!((e.eps - 10.0).abs() < 1e-12);

        let s = sc(3, 5.0, &[(0.0, 0.5), (2.0, 0.5)]);
        let p = compute_params(&s);
        assert_eq!(epoch_stats(&s, &p), Err(SolverError::NoRegeneration));
    }

    #[test]
    fn theta_examples() {
        let s = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
        let th = theta_bar(&s, &compute_params(&s));
        let expect = 0.375 * awgn_rate(14.0 / 3.0) + 0.625 * awgn_rate(2.0);
        assert!((th - expect).abs() < 1e-12);

        let s = sc(4, 10.0, &[(0.0, 0.5), (4.0, 0.5)]);
        let th = theta_bar(&s, &compute_params(&s));
        assert!((th - 0.5 * 3f64.log2()).abs() < 1e-12);

        let s = sc(3, 5.0, &[(0.0, 0.5), (2.0, 0.5)]);
        assert_eq!(theta_bar(&s, &compute_params(&s)), 0.5);
    }

    #[test]
    fn bounds_examples() {
        let s = sc(3, 5.0, &[(0.0, 0.5), (2.0, 0.5)]);
        let r = throughput_bounds(&s);
        assert!((r.throughput_lower - (0.5 - HALF_LOG2_E)).abs() < 1e-15);

        let s = sc(2, 4.0, &[(0.0, 1.0)]);
        let r = throughput_bounds(&s);
        assert_eq!(r.theta_bar, 0.0);
        assert_eq!(r.throughput_lower, -HALF_LOG2_E);

        let s = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
        let r = capacity_bounds(&s);
        assert_eq!(r.capacity_lower, 0.0);
        assert!(r.capacity_lower_unclamped < 0.0);
    }

    #[test]
    fn all_zero_arrivals() {
        let s = sc(4, 8.0, &[(0.0, 1.0)]);
        let p = compute_params(&s);
        assert!((p.e_c - 2.0).abs() < 1e-12);
        assert_eq!(p.q, 0.0);
        assert_eq!(p.p, 0.0);
    }

    #[test]
    fn residual_brackets() {
        let s = sc(5, 7.0, &[(0.5, 0.2), (3.0, 0.3), (9.0, 0.5)]);
        assert!(critical_energy_residual(&s, 0.0) > 0.0);
        assert!(critical_energy_residual(&s, 7.0) <= 0.0);
    }
}
