//! Online power-control policies behind a per-slot interface.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::rate::awgn_rate;
use crate::scenario::Scenario;
use crate::solver::{params_for_critical_energy, PolicyParams};

/// Feasibility slack on `g ≤ b`.
pub const FEASIBILITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// The block fixed-fraction policy.
    BlockFfp,
    /// Spend `q_iid = E[min(E,B̄)]/B̄` of the battery every slot.
    FixedFraction,
    /// Spend the whole battery every slot.
    Greedy,
    /// Spend `min(μ, battery)` every slot.
    ConstantMean,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::BlockFfp,
        PolicyKind::FixedFraction,
        PolicyKind::Greedy,
        PolicyKind::ConstantMean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::BlockFfp => "block_ffp",
            PolicyKind::FixedFraction => "fixed_fraction",
            PolicyKind::Greedy => "greedy",
            PolicyKind::ConstantMean => "constant_mean",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown policy `{0}` (expected p1, block_ffp, fixed_fraction, ffp, greedy or constant_mean)")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyKind {
    type Err = UnknownPolicy;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p1" | "policy1" | "block_ffp" => Ok(PolicyKind::BlockFfp),
            "ffp" | "fixed_fraction" => Ok(PolicyKind::FixedFraction),
            "greedy" => Ok(PolicyKind::Greedy),
            "constant_mean" | "mean" => Ok(PolicyKind::ConstantMean),
            other => Err(UnknownPolicy(other.to_string())),
        }
    }
}

/// What a policy may observe when choosing the power of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotContext {
    pub battery: f64,
    /// Arrival of the current block, revealed at its first slot.
    pub block_arrival: f64,
    /// 1-based position inside the block.
    pub slot_in_block: u32,
    pub block_start_battery: f64,
}

pub trait Policy {
    /// Power for the slot described by `ctx`; must lie in `[0, ctx.battery]`.
    fn power(&mut self, ctx: &SlotContext) -> f64;
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn power(&mut self, ctx: &SlotContext) -> f64 {
        (**self).power(ctx)
    }
}

/// Powers chosen for one block: `g_head` in slots `1..T−1`, `g_tail` in
/// slot `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockDecision {
    pub g_head: f64,
    pub g_tail: f64,
}

/// Battery at slot `T` after spending `g_head` in each of the first `T−1`
/// slots of a block that started at `b1` with arrival `e`.
pub fn end_of_head_battery(b1: f64, e: f64, g_head: f64, scenario: &Scenario) -> f64 {
    (b1 + (scenario.t() - 1.0) * (e - g_head)).min(scenario.battery())
}

/// The block fixed-fraction decision for state `(b1, E)`.
pub fn policy1_block(b1: f64, e: f64, scenario: &Scenario, params: &PolicyParams) -> BlockDecision {
    let q = params.q;
    if scenario.block_len() == 1 {
        return BlockDecision {
            g_head: 0.0,
            g_tail: q * b1,
        };
    }
    let t = scenario.t();
    let b = scenario.battery();
    let g_head = if e <= params.e_c {
        q / t * (b1 + (t - 1.0) * e)
    } else if e <= b {
        e - (b - b1) / (t - 1.0)
    } else {
        b
    };
    let b_t = end_of_head_battery(b1, e, g_head, scenario);
    BlockDecision {
        g_head,
        g_tail: q / (q + (1.0 - q) * t) * b_t,
    }
}

/// Final guard keeping a power inside `[0, battery]`.
fn clamp_power(g: f64, battery: f64) -> f64 {
    let c = g.clamp(0.0, battery.max(0.0));
    if (c - g).abs() > FEASIBILITY_TOL {
        debug!("power {g} clamped to {c} (battery {battery})");
    }
    c
}

/// The block fixed-fraction policy; the decision is computed at the first
/// slot of each block and replayed.
#[derive(Debug, Clone)]
pub struct BlockFixedFraction {
    scenario: Scenario,
    params: PolicyParams,
    current: Option<BlockDecision>,
}

impl BlockFixedFraction {
    pub fn new(scenario: &Scenario, params: &PolicyParams) -> Self {
        Self {
            scenario: scenario.clone(),
            params: *params,
            current: None,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl Policy for BlockFixedFraction {
    fn power(&mut self, ctx: &SlotContext) -> f64 {
        if ctx.slot_in_block == 1 || self.current.is_none() {
            self.current = Some(policy1_block(
                ctx.block_start_battery,
                ctx.block_arrival,
                &self.scenario,
                &self.params,
            ));
        }
        let d = self.current.expect("decision cached above");
        let g = if ctx.slot_in_block >= self.scenario.block_len() {
            d.g_tail
        } else {
            d.g_head
        };
        clamp_power(g, ctx.battery)
    }
}

/// `q_iid = E[min(E, B̄)]/B̄`, the fraction of the i.i.d. fixed-fraction policy.
pub fn iid_fraction(scenario: &Scenario) -> f64 {
    params_for_critical_energy(scenario, scenario.battery()).q
}

#[derive(Debug, Clone, Copy)]
pub struct FixedFraction {
    pub q: f64,
}

impl Policy for FixedFraction {
    fn power(&mut self, ctx: &SlotContext) -> f64 {
        clamp_power(self.q * ctx.battery, ctx.battery)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl Policy for Greedy {
    fn power(&mut self, ctx: &SlotContext) -> f64 {
        ctx.battery
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantMean {
    pub mu: f64,
}

impl Policy for ConstantMean {
    fn power(&mut self, ctx: &SlotContext) -> f64 {
        self.mu.min(ctx.battery)
    }
}

/// Per-slot power of a baseline policy.
pub fn baseline_decide(kind: PolicyKind, ctx: &SlotContext, scenario: &Scenario) -> f64 {
    match kind {
        PolicyKind::FixedFraction => FixedFraction {
            q: iid_fraction(scenario),
        }
        .power(ctx),
        PolicyKind::Greedy => Greedy.power(ctx),
        PolicyKind::ConstantMean => ConstantMean {
            mu: scenario.clipped().mean(),
        }
        .power(ctx),
        PolicyKind::BlockFfp => {
            let params = crate::solver::compute_params(scenario);
            BlockFixedFraction::new(scenario, &params).power(ctx)
        }
    }
}

/// A fresh policy instance for one trajectory.
pub fn build_policy(
    kind: PolicyKind,
    scenario: &Scenario,
    params: &PolicyParams,
) -> Box<dyn Policy + Send> {
    match kind {
        PolicyKind::BlockFfp => Box::new(BlockFixedFraction::new(scenario, params)),
        PolicyKind::FixedFraction => Box::new(FixedFraction {
            q: iid_fraction(scenario),
        }),
        PolicyKind::Greedy => Box::new(Greedy),
        PolicyKind::ConstantMean => Box::new(ConstantMean {
            mu: scenario.clipped().mean(),
        }),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UniformizeError {
    #[error("a block of length 1 has no head slots to uniformize")]
    NoHeadSlots,
    #[error("expected {expected} allocations, got {got}")]
    Length { expected: usize, got: usize },
    #[error("allocation {power} at slot {slot} is infeasible with battery {battery}")]
    Infeasible { slot: usize, power: f64, battery: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Uniformized {
    /// Constant power replacing the input in slots `1..T−1`.
    pub g_tilde: f64,
    /// Battery at slot `T` under the input allocations.
    pub b_t: f64,
}

/// Replaces `T−1` feasible head powers by a single constant with the same
/// end-of-head battery and no smaller total rate.
pub fn uniformize_block(
    allocations: &[f64],
    b1: f64,
    e: f64,
    scenario: &Scenario,
) -> Result<Uniformized, UniformizeError> {
    let t = scenario.block_len() as usize;
    if t == 1 {
        return Err(UniformizeError::NoHeadSlots);
    }
    if allocations.len() != t - 1 {
        return Err(UniformizeError::Length {
            expected: t - 1,
            got: allocations.len(),
        });
    }
    let cap = scenario.battery();
    let b_t = replay_head(allocations, b1, e, cap)?;
    let g_tilde = (e - (b_t - b1) / (t as f64 - 1.0)).min(cap);
    Ok(Uniformized { g_tilde, b_t })
}

/// Runs the head slots of a block and returns the battery at slot `T`.
pub fn replay_head(
    allocations: &[f64],
    b1: f64,
    e: f64,
    cap: f64,
) -> Result<f64, UniformizeError> {
    let mut b = b1;
    for (j, &g) in allocations.iter().enumerate() {
        if !(g >= 0.0 && g <= b + FEASIBILITY_TOL) {
            return Err(UniformizeError::Infeasible {
                slot: j + 1,
                power: g,
                battery: b,
            });
        }
        b = (b - g + e).min(cap);
    }
    Ok(b)
}

/// `Σ C(g_j)` in bits.
pub fn head_reward(allocations: &[f64]) -> f64 {
    allocations.iter().map(|&g| awgn_rate(g)).sum()
}

/// Outcome of uniformizing random feasible head allocations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformizationReport {
    pub blocks: usize,
    /// Largest `|b_T(uniform) − b_T(original)|`.
    pub max_end_battery_diff: f64,
    /// Largest `reward(original) − reward(uniform)`; nonpositive when the
    /// construction holds.
    pub max_reward_loss: f64,
    pub violations: usize,
}

/// Draws `blocks` random states and feasible head allocations, uniformizes
/// them and replays the result. Blocks of length 1 have nothing to check.
pub fn check_uniformization(scenario: &Scenario, blocks: usize, seed: u64) -> UniformizationReport {
    let mut report = UniformizationReport {
        blocks: 0,
        max_end_battery_diff: 0.0,
        max_reward_loss: f64::NEG_INFINITY,
        violations: 0,
    };
    if scenario.block_len() == 1 {
        report.max_reward_loss = 0.0;
        return report;
    }
    let cap = scenario.battery();
    let atoms = scenario.clipped().atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..blocks {
        let e = atoms[rng.gen_range(0..atoms.len())].value;
        let b1 = e + rng.gen::<f64>() * (cap - e);
        let mut alloc = Vec::with_capacity(scenario.block_len() as usize - 1);
        let mut b = b1;
        for _ in 1..scenario.block_len() {
            let g = rng.gen::<f64>() * b;
            alloc.push(g);
            b = (b - g + e).min(cap);
        }
        report.blocks += 1;
        let ok = uniformize_block(&alloc, b1, e, scenario).and_then(|u| {
            let uniform = vec![u.g_tilde; alloc.len()];
            let end = replay_head(&uniform, b1, e, cap)?;
            Ok(((end - u.b_t).abs(), head_reward(&alloc) - head_reward(&uniform)))
        });
        match ok {
            Ok((diff, loss)) => {
                report.max_end_battery_diff = report.max_end_battery_diff.max(diff);
                report.max_reward_loss = report.max_reward_loss.max(loss);
                if diff >= 1e-12 || loss > 1e-12 {
                    report.violations += 1;
                }
            }
            Err(_) => report.violations += 1,
        }
    }
    report
}
