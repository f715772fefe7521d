//! Battery dynamics, seeded arrival streams and Monte Carlo estimates.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::policies::{build_policy, Policy, PolicyKind, SlotContext, FEASIBILITY_TOL};
use crate::rate::awgn_rate;
use crate::scenario::Scenario;
use crate::solver::{compute_params, PolicyParams, ROOT_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("policy chose power {power} at slot {slot} with only {battery} in the battery")]
    PolicyViolation { slot: u64, power: f64, battery: f64 },
    #[error("power {power} exceeds battery {battery}")]
    InfeasiblePower { power: f64, battery: f64 },
    #[error("at least 2 replications are required (got {0})")]
    TooFewReps(usize),
    #[error("at least one block is required")]
    NoBlocks,
    #[error("arrival law has mass strictly between 0 and E_c")]
    NotSemiBernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    pub battery: f64,
    /// Energy lost to the capacity limit; positive exactly when the clamp binds.
    pub overflow: f64,
}

/// `b' = min(b − g + E_next, B̄)`.
pub fn step_battery(b: f64, g: f64, e_next: f64, cap: f64) -> Result<BatteryStep, SimError> {
    if !(g >= 0.0 && g <= b + FEASIBILITY_TOL) {
        return Err(SimError::InfeasiblePower { power: g, battery: b });
    }
    let raw = b - g + e_next;
    Ok(if raw > cap {
        BatteryStep {
            battery: cap,
            overflow: raw - cap,
        }
    } else {
        BatteryStep {
            battery: raw.max(0.0),
            overflow: 0.0,
        }
    })
}

/// Block values drawn by inverse CDF from a counter-based ChaCha stream:
/// block `i` always consumes the 64-bit word at position `i`, so any block can
/// be regenerated without replaying the ones before it.
#[derive(Debug, Clone)]
pub struct ArrivalStream {
    rng: ChaCha8Rng,
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ArrivalStream {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let d = scenario.clipped();
        let mut acc = 0.0;
        let cumulative = d
            .atoms()
            .iter()
            .map(|a| {
                acc += a.prob;
                acc
            })
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            values: d.atoms().iter().map(|a| a.value).collect(),
            cumulative,
        }
    }

    fn lookup(&self, word: u64) -> f64 {
        let u = (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.values[k.min(self.values.len() - 1)]
    }

    /// Value of block `index` (0-based), independent of previous calls.
    pub fn block(&self, index: u64) -> f64 {
        let mut rng = self.rng.clone();
        rng.set_word_pos(2 * u128::from(index));
        self.lookup(rng.next_u64())
    }

    /// Skips ahead to block `index`.
    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(2 * u128::from(index));
    }
}

impl Iterator for ArrivalStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        let w = self.rng.next_u64();
        Some(self.lookup(w))
    }
}

/// Per-slot arrival sequence of `n_blocks·T` values.
pub fn generate_arrivals(scenario: &Scenario, n_blocks: usize, seed: u64) -> Vec<f64> {
    let t = scenario.block_len() as usize;
    ArrivalStream::new(scenario, seed)
        .take(n_blocks)
        .flat_map(|v| std::iter::repeat(v).take(t))
        .collect()
}

/// One slot as seen by an observer of [`simulate_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotRecord {
    /// 1-based slot index over the whole run, burn-in included.
    pub slot: u64,
    /// 0-based block index over the whole run.
    pub block: u64,
    pub slot_in_block: u32,
    pub arrival: f64,
    pub battery: f64,
    pub block_start_battery: f64,
    pub power: f64,
    pub overflow: f64,
    pub measured: bool,
}

/// Energy bookkeeping over the whole run. `harvested` counts the arrivals
/// that enter the battery, i.e. every slot but the first.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EnergyLedger {
    pub initial: f64,
    pub harvested: f64,
    pub consumed: f64,
    pub overflowed: f64,
    pub final_battery: f64,
}

impl EnergyLedger {
    /// `consumed + final − initial − (harvested − overflowed)`.
    pub fn imbalance(&self) -> f64 {
        self.consumed + self.final_battery - self.initial - (self.harvested - self.overflowed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryResult {
    /// Measured slots (burn-in excluded).
    pub horizon_slots: u64,
    pub total_reward_bits: f64,
    pub time_avg: f64,
    pub overflow_events: u64,
    pub seed: u64,
    pub energy: EnergyLedger,
}

/// Runs `burn_in_blocks + n_blocks` blocks from `b₁ = B̄` and averages the
/// rate over the last `n_blocks`.
pub fn simulate_with<P, F>(
    policy: &mut P,
    scenario: &Scenario,
    burn_in_blocks: u64,
    n_blocks: u64,
    seed: u64,
    mut observer: F,
) -> Result<TrajectoryResult, SimError>
where
    P: Policy + ?Sized,
    F: FnMut(&SlotRecord),
{
    if n_blocks == 0 {
        return Err(SimError::NoBlocks);
    }
    let t = scenario.block_len();
    let cap = scenario.battery();
    let mut arrivals = ArrivalStream::new(scenario, seed);
    let total_blocks = burn_in_blocks + n_blocks;

    let mut battery = cap;
    let mut ledger = EnergyLedger {
        initial: cap,
        ..Default::default()
    };
    let mut reward = 0.0;
    let mut overflow_events = 0;
    let mut slot: u64 = 0;
    let mut e = arrivals.next().expect("stream is infinite");
    for block in 0..total_blocks {
        let measured = block >= burn_in_blocks;
        let b1 = battery;
        let next_block_arrival = if block + 1 < total_blocks {
            arrivals.next()
        } else {
            None
        };
        for j in 1..=t {
            slot += 1;
            let ctx = SlotContext {
                battery,
                block_arrival: e,
                slot_in_block: j,
                block_start_battery: b1,
            };
            let g = policy.power(&ctx);
            if !(g >= 0.0 && g <= battery + FEASIBILITY_TOL) {
                return Err(SimError::PolicyViolation {
                    slot,
                    power: g,
                    battery,
                });
            }
            let incoming = if j < t { Some(e) } else { next_block_arrival };
            let step = match incoming {
                Some(e_next) => {
                    ledger.harvested += e_next;
                    step_battery(battery, g, e_next, cap)?
                }
                None => step_battery(battery, g, 0.0, cap)?,
            };
            ledger.consumed += g;
            ledger.overflowed += step.overflow;
            if step.overflow > 0.0 && measured {
                overflow_events += 1;
            }
            if measured {
                reward += awgn_rate(g);
            }
            observer(&SlotRecord {
                slot,
                block,
                slot_in_block: j,
                arrival: e,
                battery,
                block_start_battery: b1,
                power: g,
                overflow: step.overflow,
                measured,
            });
            battery = step.battery;
        }
        if let Some(v) = next_block_arrival {
            e = v;
        }
    }
    ledger.final_battery = battery;
    let horizon_slots = n_blocks * u64::from(t);
    Ok(TrajectoryResult {
        horizon_slots,
        total_reward_bits: reward,
        time_avg: reward / horizon_slots as f64,
        overflow_events,
        seed,
        energy: ledger,
    })
}

pub fn simulate<P: Policy + ?Sized>(
    policy: &mut P,
    scenario: &Scenario,
    n_blocks: u64,
    seed: u64,
) -> Result<TrajectoryResult, SimError> {
    simulate_with(policy, scenario, 0, n_blocks, seed, |_| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloConfig {
    pub n_blocks: u64,
    pub reps: usize,
    pub base_seed: u64,
    pub burn_in_blocks: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_blocks: 100_000,
            reps: 16,
            base_seed: 0,
            burn_in_blocks: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    pub mean: f64,
    /// Sample standard deviation of the replication means over `√reps`.
    pub stderr: f64,
    pub reps: usize,
    pub horizon_slots: u64,
    pub burn_in_slots: u64,
    pub rep_means: Vec<f64>,
}

/// Replications with seeds `base_seed + r`, run in parallel and merged in
/// seed order.
pub fn monte_carlo_with<P, F>(
    make_policy: F,
    scenario: &Scenario,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloResult, SimError>
where
    P: Policy,
    F: Fn() -> P + Sync,
{
    if cfg.reps < 2 {
        return Err(SimError::TooFewReps(cfg.reps));
    }
    let runs: Vec<TrajectoryResult> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let mut policy = make_policy();
            simulate_with(
                &mut policy,
                scenario,
                cfg.burn_in_blocks,
                cfg.n_blocks,
                cfg.base_seed.wrapping_add(r as u64),
                |_| {},
            )
        })
        .collect::<Result<_, _>>()?;
    let rep_means: Vec<f64> = runs.iter().map(|r| r.time_avg).collect();
    let (mean, stderr) = mean_and_stderr(&rep_means);
    let t = u64::from(scenario.block_len());
    Ok(MonteCarloResult {
        mean,
        stderr,
        reps: cfg.reps,
        horizon_slots: cfg.n_blocks * t,
        burn_in_slots: cfg.burn_in_blocks * t,
        rep_means,
    })
}

pub fn monte_carlo(
    kind: PolicyKind,
    scenario: &Scenario,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloResult, SimError> {
    monte_carlo_with_params(kind, scenario, &compute_params(scenario), cfg)
}

/// As [`monte_carlo`] but with externally supplied policy parameters.
pub fn monte_carlo_with_params(
    kind: PolicyKind,
    scenario: &Scenario,
    params: &PolicyParams,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloResult, SimError> {
    monte_carlo_with(|| build_policy(kind, scenario, params), scenario, cfg)
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// No atom strictly between 0 and `e_c`.
pub fn check_semi_bernoulli(scenario: &Scenario, e_c: f64) -> bool {
    let tol = ROOT_TOL * (1.0 + scenario.battery());
    scenario
        .clipped()
        .atoms()
        .iter()
        .all(|a| a.value == 0.0 || a.value >= e_c - tol)
}

/// Certified truncation error of [`renewal_series_lower_bound`].
pub const SERIES_TAIL_TOL: f64 = 1e-12;

/// Renewal-reward lower bound on the throughput of the block fixed-fraction
/// policy for (semi-)Bernoulli arrivals, in bits per slot.
pub fn renewal_series_lower_bound(
    scenario: &Scenario,
    params: &PolicyParams,
) -> Result<f64, SimError> {
    if !check_semi_bernoulli(scenario, params.e_c) {
        return Err(SimError::NotSemiBernoulli);
    }
    let q = params.q;
    if q <= 0.0 {
        return Ok(0.0);
    }
    let t = scenario.t();
    let e_c = params.e_c;
    let tol = ROOT_TOL * (1.0 + scenario.battery());
    let tail_c = awgn_rate(q * e_c) / t;
    let (mass, first) = scenario
        .clipped()
        .atoms()
        .iter()
        .filter(|a| a.value >= e_c - tol && a.value > 0.0)
        .fold((0.0, 0.0), |(m, s), a| {
            let head = if scenario.block_len() > 1 {
                let g = crate::solver::recharge_head_power(scenario, a.value.max(e_c));
                (t - 1.0) / t * awgn_rate(g)
            } else {
                0.0
            };
            (m + a.prob, s + a.prob * (head + tail_c))
        });
    let first = if mass > 0.0 { first / mass } else { 0.0 };
    if q >= 1.0 {
        return Ok(first);
    }
    let r = 1.0 - q;
    let mut sum = 0.0;
    let mut decay = 1.0;
    for _ in 1..100_000 {
        decay *= r;
        sum += awgn_rate(q * decay * e_c) * decay;
        let by_rate = awgn_rate(q * decay * r * e_c) * decay * r / q;
        let by_linear =
            q * e_c * (decay * r).powi(2) / (2.0 * std::f64::consts::LN_2 * (1.0 - r * r));
        if q * by_rate.min(by_linear) < SERIES_TAIL_TOL {
            break;
        }
    }
    Ok(q * (first + sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::Greedy;

    struct Zero;
    impl Policy for Zero {
        fn power(&mut self, _: &SlotContext) -> f64 {
            0.0
        }
    }

    fn bern() -> Scenario {
        Scenario::from_pairs(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]).unwrap()
    }

    #[test]
    fn battery_steps() {
        let s = step_battery(10.0, 0.0, 5.0, 10.0).unwrap();
        assert_eq!(s.battery, 10.0);
        assert!(s.overflow > 0.0);
        let s = step_battery(5.0, 2.0, 1.0, 10.0).unwrap();
        assert_eq!((s.battery, s.overflow), (4.0, 0.0));
        assert!(step_battery(3.0, 4.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn arrivals_block_constant_and_deterministic() {
        let s = bern();
        let a = generate_arrivals(&s, 200, 9);
        assert_eq!(a.len(), 800);
        for blk in a.chunks(4) {
            assert!(blk.iter().all(|&v| v == blk[0]));
        }
        assert_eq!(a, generate_arrivals(&s, 200, 9));
        assert_ne!(a, generate_arrivals(&s, 200, 10));
    }

    #[test]
    fn random_access_matches_sequential() {
        let s = Scenario::from_pairs(2, 5.0, &[(0.0, 0.2), (1.0, 0.3), (4.0, 0.5)]).unwrap();
        let stream = ArrivalStream::new(&s, 77);
        let seq: Vec<f64> = stream.clone().take(500).collect();
        for (i, v) in seq.iter().enumerate() {
            assert_eq!(stream.block(i as u64), *v);
        }
        let mut skipped = stream.clone();
        skipped.seek(321);
        assert_eq!(skipped.next(), Some(seq[321]));
    }

    #[test]
    fn zero_policy() {
        let s = bern();
        let mut min_battery = f64::INFINITY;
        let r = simulate_with(&mut Zero, &s, 0, 500, 1, |rec| {
            min_battery = min_battery.min(rec.battery)
        })
        .unwrap();
        assert_eq!(r.time_avg, 0.0);
        assert_eq!(min_battery, 10.0);
    }

    #[test]
    fn greedy_deterministic_single_slot() {
        let s = Scenario::from_pairs(1, 5.0, &[(2.0, 1.0)]).unwrap();
        let r = simulate(&mut Greedy, &s, 10_000, 3).unwrap();
        let expect = (awgn_rate(5.0) + 9_999.0 * awgn_rate(2.0)) / 10_000.0;
        assert!((r.time_avg - expect).abs() < 1e-12);
    }

    #[test]
    fn energy_is_conserved() {
        let s = Scenario::from_pairs(3, 6.0, &[(0.0, 0.4), (2.0, 0.3), (9.0, 0.3)]).unwrap();
        for kind in PolicyKind::ALL {
            let p = compute_params(&s);
            let mut pol = build_policy(kind, &s, &p);
            let r = simulate_with(&mut pol, &s, 10, 2_000, 5, |_| {}).unwrap();
            assert!(r.energy.imbalance().abs() < 1e-9, "{kind}: {:?}", r.energy);
        }
    }

    #[test]
    fn too_few_reps() {
        let cfg = MonteCarloConfig {
            reps: 1,
            ..Default::default()
        };
        assert_eq!(
            monte_carlo(PolicyKind::Greedy, &bern(), &cfg),
            Err(SimError::TooFewReps(1))
        );
    }

    #[test]
    fn degenerate_monte_carlo() {
        let s = Scenario::from_pairs(2, 3.0, &[(0.0, 1.0)]).unwrap();
        let cfg = MonteCarloConfig {
            n_blocks: 1_000,
            reps: 4,
            burn_in_blocks: 100,
            base_seed: 0,
        };
        let r = monte_carlo(PolicyKind::BlockFfp, &s, &cfg).unwrap();
        assert_eq!((r.mean, r.stderr), (0.0, 0.0));
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let cfg = MonteCarloConfig {
            n_blocks: 2_000,
            reps: 6,
            burn_in_blocks: 10,
            base_seed: 42,
        };
        let a = monte_carlo(PolicyKind::BlockFfp, &bern(), &cfg).unwrap();
        let b = monte_carlo(PolicyKind::BlockFfp, &bern(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn semi_bernoulli_detection() {
        let s = bern();
        assert!(check_semi_bernoulli(&s, 4.0));
        let s = Scenario::from_pairs(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]).unwrap();
        assert!(!check_semi_bernoulli(&s, 13.0 / 3.0));
        let s = Scenario::from_pairs(2, 6.0, &[(0.0, 0.3), (4.0, 0.7)]).unwrap();
        assert!(check_semi_bernoulli(&s, 4.0));
    }

    #[test]
    fn series_rejects_general_law() {
        let s = Scenario::from_pairs(2, 6.0, &[(1.0, 0.5), (5.0, 0.5)]).unwrap();
        let p = compute_params(&s);
        assert_eq!(
            renewal_series_lower_bound(&s, &p),
            Err(SimError::NotSemiBernoulli)
        );
    }

    #[test]
    fn series_with_certain_recharge() {
        let s = Scenario::from_pairs(4, 4.0, &[(6.0, 1.0)]).unwrap();
        let p = compute_params(&s);
        assert_eq!(p.q, 1.0);
        let v = renewal_series_lower_bound(&s, &p).unwrap();
        let th = crate::solver::theta_bar(&s, &p);
        assert!((v - th).abs() < 1e-12, "{v} vs {th}");
    }
}
