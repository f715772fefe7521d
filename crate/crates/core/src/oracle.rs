//! Numerical references: relative value iteration on the reduced block MDP,
//! finite-horizon evaluation of the block fixed-fraction policy, and the
//! mean-preserving semi-Bernoulli modification of the arrival law.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::rate::awgn_rate;
use crate::scenario::{Atom, DiscreteDistribution, Scenario, ScenarioError};
use crate::solver::PolicyParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("value iteration did not converge in {iterations} iterations (span {span:e})")]
    NotConverged { iterations: usize, span: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridSpec {
    pub n_battery: usize,
    pub n_action: usize,
    pub vi_tolerance: f64,
    pub max_iterations: usize,
    /// `(atom index, battery grid index)` pinned to zero by relative VI.
    pub reference_state: (usize, usize),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_battery: 512,
            n_action: 128,
            vi_tolerance: 1e-6,
            max_iterations: 100_000,
            reference_state: (0, 0),
        }
    }
}

impl GridSpec {
    pub fn with_battery_points(n_battery: usize) -> Self {
        Self {
            n_battery,
            ..Default::default()
        }
    }

    /// Halves both grid steps (`n → 2n − 1`), so every coarse point is kept.
    pub fn doubled(&self) -> Self {
        Self {
            n_battery: 2 * self.n_battery - 1,
            n_action: 2 * self.n_action - 1,
            reference_state: (self.reference_state.0, 2 * self.reference_state.1),
            ..*self
        }
    }

    fn validate(&self) -> Result<(), OracleError> {
        if self.n_battery < 16 {
            return Err(OracleError::InvalidGrid(format!(
                "n_battery must be at least 16 (got {})",
                self.n_battery
            )));
        }
        if self.n_action < 2 {
            return Err(OracleError::InvalidGrid(format!(
                "n_action must be at least 2 (got {})",
                self.n_action
            )));
        }
        if !(self.vi_tolerance > 0.0) {
            return Err(OracleError::InvalidGrid("vi_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `n` equally spaced points on `[lo, hi]`; a single point when `lo == hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct UniformGrid {
    lo: f64,
    hi: f64,
    n: usize,
}

impl UniformGrid {
    fn new(lo: f64, hi: f64, n: usize) -> Self {
        if hi > lo {
            Self { lo, hi, n }
        } else {
            Self { lo, hi: lo, n: 1 }
        }
    }

    fn point(&self, i: usize) -> f64 {
        if self.n == 1 {
            return self.lo;
        }
        if i + 1 == self.n {
            return self.hi;
        }
        self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64
    }

    /// Left index and weight on the right neighbour for linear interpolation.
    fn locate(&self, x: f64) -> (usize, f64) {
        if self.n == 1 {
            return (0, 0.0);
        }
        let s = ((x - self.lo) / (self.hi - self.lo) * (self.n - 1) as f64)
            .clamp(0.0, (self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64)
    }
}

#[inline]
fn lerp(values: &[f64], (i, w): (usize, f64)) -> f64 {
    if w == 0.0 {
        values[i]
    } else {
        values[i] * (1.0 - w) + values[i + 1] * w
    }
}

/// Pointer into the value table of one arrival state.
#[derive(Debug, Clone, Copy)]
struct Interp {
    offset: usize,
    len: usize,
    index: usize,
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct HeadAction {
    g_head: f64,
    reward: f64,
    tail: (usize, f64),
    b_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PolicyEntry {
    pub arrival: f64,
    pub b1: f64,
    pub g_head: f64,
    pub g_tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViResult {
    /// Optimal gain in bits per slot.
    pub theta_vi: f64,
    pub iterations: usize,
    pub span: f64,
    pub grid: GridSpec,
    /// Greedy decision at every `(arrival, b₁)` grid state.
    pub policy_table: Vec<PolicyEntry>,
}

struct ReducedMdp {
    atoms: Vec<Atom>,
    grids: Vec<UniformGrid>,
    offsets: Vec<usize>,
    n_states: usize,
    tail_grid: UniformGrid,
    head_actions: Vec<Vec<HeadAction>>,
    /// For tail point `i`, where each arrival lands in the next block.
    next_state: Vec<Vec<(f64, Interp)>>,
    /// `(1/T)·C(d·Δ)` for a drop of `d` tail grid steps.
    tail_reward: Vec<f64>,
}

impl ReducedMdp {
    fn new(scenario: &Scenario, grid: &GridSpec) -> Self {
        let t = scenario.t();
        let cap = scenario.battery();
        let atoms = scenario.clipped().atoms().to_vec();
        let grids: Vec<UniformGrid> = atoms
            .iter()
            .map(|a| UniformGrid::new(a.value, cap, grid.n_battery))
            .collect();
        let mut offsets = Vec::with_capacity(grids.len());
        let mut n_states = 0;
        for g in &grids {
            offsets.push(n_states);
            n_states += g.n;
        }
        let tail_grid = UniformGrid::new(0.0, cap, grid.n_battery);

        let mut head_actions = Vec::with_capacity(n_states);
        for (k, a) in atoms.iter().enumerate() {
            let e = a.value;
            for j in 0..grids[k].n {
                let b1 = grids[k].point(j);
                let actions = if scenario.block_len() == 1 {
                    vec![HeadAction {
                        g_head: 0.0,
                        reward: 0.0,
                        tail: tail_grid.locate(b1),
                        b_t: b1,
                    }]
                } else {
                    let g_max = (e - (e - b1) / (t - 1.0)).min(cap).min(b1).max(0.0);
                    (0..grid.n_action)
                        .map(|i| {
                            let g = if i + 1 == grid.n_action {
                                g_max
                            } else {
                                g_max * i as f64 / (grid.n_action - 1) as f64
                            };
                            let b_t = (b1 + (t - 1.0) * (e - g)).min(cap).max(0.0);
                            HeadAction {
                                g_head: g,
                                reward: (t - 1.0) / t * awgn_rate(g),
                                tail: tail_grid.locate(b_t),
                                b_t,
                            }
                        })
                        .collect()
                };
                head_actions.push(actions);
            }
        }

        let next_state = (0..tail_grid.n)
            .map(|i| {
                let y = tail_grid.point(i);
                atoms
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        let (index, weight) = grids[k].locate((y + a.value).min(cap));
                        (
                            a.prob,
                            Interp {
                                offset: offsets[k],
                                len: grids[k].n,
                                index,
                                weight,
                            },
                        )
                    })
                    .collect()
            })
            .collect();

        let step = if tail_grid.n > 1 {
            cap / (tail_grid.n - 1) as f64
        } else {
            0.0
        };
        let tail_reward = (0..tail_grid.n)
            .map(|d| awgn_rate(d as f64 * step) / t)
            .collect();

        Self {
            atoms,
            grids,
            offsets,
            n_states,
            tail_grid,
            head_actions,
            next_state,
            tail_reward,
        }
    }

    /// Expected next-block value after leaving `y_i` in the battery.
    fn continuation(&self, h: &[f64]) -> Vec<f64> {
        self.next_state
            .iter()
            .map(|row| {
                row.iter()
                    .map(|(p, it)| p * lerp(&h[it.offset..it.offset + it.len], (it.index, it.weight)))
                    .sum()
            })
            .collect()
    }

    /// Best value of the last slot from battery `b_m`, and the chosen `y`.
    fn tail_values(&self, w: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let rows: Vec<(f64, usize)> = (0..self.tail_grid.n)
            .into_par_iter()
            .map(|m| {
                (0..=m)
                    .map(|i| (self.tail_reward[m - i] + w[i], i))
                    .fold((f64::NEG_INFINITY, 0), |acc, v| if v.0 > acc.0 { v } else { acc })
            })
            .collect();
        rows.into_iter().unzip()
    }

    fn bellman(&self, h: &[f64]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
        let w = self.continuation(h);
        let (v_tail, tail_arg) = self.tail_values(&w);
        let (th, head_arg): (Vec<f64>, Vec<usize>) = self
            .head_actions
            .par_iter()
            .map(|acts| {
                acts.iter()
                    .enumerate()
                    .map(|(a, act)| (act.reward + lerp(&v_tail, act.tail), a))
                    .fold((f64::NEG_INFINITY, 0), |acc, v| if v.0 > acc.0 { v } else { acc })
            })
            .unzip();
        (th, head_arg, tail_arg)
    }

    fn policy_table(&self, head_arg: &[usize], tail_arg: &[usize]) -> Vec<PolicyEntry> {
        let mut out = Vec::with_capacity(self.n_states);
        for (k, a) in self.atoms.iter().enumerate() {
            for j in 0..self.grids[k].n {
                let s = self.offsets[k] + j;
                let act = self.head_actions[s][head_arg[s]];
                let m = ((act.b_t / self.tail_grid.hi.max(f64::MIN_POSITIVE))
                    * (self.tail_grid.n - 1) as f64)
                    .round() as usize;
                let m = m.min(self.tail_grid.n - 1);
                let y = self.tail_grid.point(tail_arg[m]);
                out.push(PolicyEntry {
                    arrival: a.value,
                    b1: self.grids[k].point(j),
                    g_head: act.g_head,
                    g_tail: (act.b_t - y).max(0.0),
                });
            }
        }
        out
    }
}

/// Damping of the aperiodicity transform `h ← (1−τ)h + τ·Th`.
const APERIODICITY: f64 = 0.9;

/// Relative value iteration for the optimal gain of the block MDP with
/// states `(b₁, E)` and actions `(g_head, g_tail)`.
pub fn value_iterate(scenario: &Scenario, grid: &GridSpec) -> Result<ViResult, OracleError> {
    grid.validate()?;
    let mdp = ReducedMdp::new(scenario, grid);
    let (rk, rj) = grid.reference_state;
    let rk = rk.min(mdp.atoms.len() - 1);
    let reference = mdp.offsets[rk] + rj.min(mdp.grids[rk].n - 1);

    let mut h = vec![0.0; mdp.n_states];
    if scenario.clipped().max_value() == 0.0 {
        // Nothing is ever harvested, so the gain is exactly zero.
        let (_, head_arg, tail_arg) = mdp.bellman(&h);
        return Ok(ViResult {
            theta_vi: 0.0,
            iterations: 0,
            span: 0.0,
            grid: *grid,
            policy_table: mdp.policy_table(&head_arg, &tail_arg),
        });
    }
    let mut span = f64::INFINITY;
    for it in 1..=grid.max_iterations {
        let (th, head_arg, tail_arg) = mdp.bellman(&h);
        let (lo, hi) = th
            .iter()
            .zip(&h)
            .map(|(a, b)| a - b)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            });
        span = hi - lo;
        if span < grid.vi_tolerance {
            return Ok(ViResult {
                theta_vi: 0.5 * (lo + hi),
                iterations: it,
                span,
                grid: *grid,
                policy_table: mdp.policy_table(&head_arg, &tail_arg),
            });
        }
        for (hv, tv) in h.iter_mut().zip(&th) {
            *hv = (1.0 - APERIODICITY) * *hv + APERIODICITY * tv;
        }
        let r = h[reference];
        for hv in &mut h {
            *hv -= r;
        }
    }
    Err(OracleError::NotConverged {
        iterations: grid.max_iterations,
        span,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDoubling {
    pub coarse: ViResult,
    pub fine: ViResult,
    /// `|θ_fine − θ_coarse|`.
    pub delta_grid: f64,
}

/// Runs value iteration on `grid` and on [`GridSpec::doubled`].
pub fn value_iterate_with_slack(
    scenario: &Scenario,
    grid: &GridSpec,
) -> Result<GridDoubling, OracleError> {
    let coarse = value_iterate(scenario, grid)?;
    let fine = value_iterate(scenario, &grid.doubled())?;
    let delta_grid = (fine.theta_vi - coarse.theta_vi).abs();
    Ok(GridDoubling {
        coarse,
        fine,
        delta_grid,
    })
}

/// Mean-preserving two-point law on `{lo, hi}` for atoms inside `[lo, hi]`.
/// Returns `(Pr(lo), Pr(hi))` relative to the total mass of `atoms`.
pub fn two_point_reduction(atoms: &[Atom], lo: f64, hi: f64) -> (f64, f64) {
    let mass: f64 = atoms.iter().map(|a| a.prob).sum();
    if mass <= 0.0 || hi <= lo {
        return (1.0, 0.0);
    }
    let mean = atoms.iter().map(|a| a.prob * a.value).sum::<f64>() / mass;
    let w = ((mean - lo) / (hi - lo)).clamp(0.0, 1.0);
    (1.0 - w, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedScenario {
    pub base: Scenario,
    /// Same `T` and `B̄`, arrivals replaced by `Ê`.
    pub modified: Scenario,
    /// `Pr(W = E_c)`.
    pub w_prob: f64,
}

impl ModifiedScenario {
    pub fn dist(&self) -> &DiscreteDistribution {
        self.modified.clipped()
    }
}

/// Collapses the mass at or below `E_c` onto `{0, E_c}` keeping the mean;
/// atoms above `E_c` are kept.
pub fn modify_semi_bernoulli(
    scenario: &Scenario,
    params: &PolicyParams,
) -> Result<ModifiedScenario, OracleError> {
    let e_c = params.e_c;
    let d = scenario.clipped();
    let (low, high): (Vec<Atom>, Vec<Atom>) = d.atoms().iter().partition(|a| a.value <= e_c);
    let low_mass: f64 = low.iter().map(|a| a.prob).sum();
    let w_prob = if e_c > 0.0 {
        (params.mu_tilde / e_c).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut atoms = Vec::with_capacity(high.len() + 2);
    if low_mass > 0.0 {
        let p0 = low_mass * (1.0 - w_prob);
        let pc = low_mass * w_prob;
        if p0 > 0.0 {
            atoms.push(Atom::new(0.0, p0));
        }
        if pc > 0.0 {
            match atoms.last_mut() {
                Some(last) if last.value == e_c => last.prob += pc,
                _ => atoms.push(Atom::new(e_c, pc)),
            }
        }
    }
    atoms.extend(high);
    let dist = DiscreteDistribution::from_unsorted(atoms, crate::scenario::LOAD_PROB_SUM_TOL)?;
    let modified = Scenario::new(scenario.block_len(), scenario.battery(), dist)?;
    Ok(ModifiedScenario {
        base: scenario.clone(),
        modified,
        w_prob,
    })
}

/// `r(x, s)`, the block reward of the fixed-fraction policy in reduced
/// coordinates `x = (b₁ + (T−1)E)/T`, `s = 1{E > E_c}`.
pub fn reduced_reward(scenario: &Scenario, params: &PolicyParams, x: f64, s: bool) -> f64 {
    let t = scenario.t();
    let q = params.q;
    let cap = scenario.battery();
    if !s {
        (t - 1.0) / t * awgn_rate(q * x) + awgn_rate(q * x.min(params.e_c)) / t
    } else {
        let head = if scenario.block_len() > 1 {
            let g = ((t * x - cap) / (t - 1.0)).min(cap).max(0.0);
            (t - 1.0) / t * awgn_rate(g)
        } else {
            0.0
        };
        head + awgn_rate(q * params.e_c) / t
    }
}

/// Next reduced energy level given the current level (already replaced by
/// `E_c` when `s = 1`) and the next arrival.
fn next_level(scenario: &Scenario, params: &PolicyParams, x_eff: f64, e_next: f64) -> f64 {
    let t = scenario.t();
    ((1.0 - params.q) * x_eff + e_next).min((scenario.battery() + (t - 1.0) * e_next) / t)
}

/// `J_N(x, s)` for the fixed-fraction policy. The `s = 0` branch lives on a
/// uniform grid over `[0, B̄]`; the `s = 1` branch does not depend on `x`
/// through the dynamics and is kept in closed form `r(x,1) + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTable {
    pub horizon: usize,
    pub x: Vec<f64>,
    pub j0: Vec<f64>,
    /// `E[J_{N−1}]` from the state following a recharge block, so that
    /// `J_N(x, 1) = r(x, 1) + recharge_continuation`.
    pub recharge_continuation: f64,
    e_c: f64,
    battery: f64,
}

impl ValueTable {
    pub fn value(&self, scenario: &Scenario, params: &PolicyParams, x: f64, s: bool) -> f64 {
        if s {
            reduced_reward(scenario, params, x, true) + self.recharge_continuation
        } else {
            let g = UniformGrid::new(0.0, self.battery, self.x.len());
            lerp(&self.j0, g.locate(x))
        }
    }

    /// `J_N(·, 1)` sampled on `n` points of `[E_c, B̄]`.
    pub fn recharge_branch(&self, scenario: &Scenario, params: &PolicyParams, n: usize) -> Vec<f64> {
        let g = UniformGrid::new(self.e_c.min(self.battery), self.battery, n);
        (0..g.n)
            .map(|i| self.value(scenario, params, g.point(i), true))
            .collect()
    }
}

/// Backward recursion for `J_N` under arrivals `arrivals` (the clipped law
/// of `scenario`, or a modification of it) with `scenario`'s parameters.
pub fn finite_horizon_value(
    scenario: &Scenario,
    arrivals: &DiscreteDistribution,
    params: &PolicyParams,
    horizon: usize,
    n_grid: usize,
) -> ValueTable {
    let cap = scenario.battery();
    let grid = UniformGrid::new(0.0, cap, n_grid.max(2));
    let xs: Vec<f64> = (0..grid.n).map(|i| grid.point(i)).collect();
    let r0: Vec<f64> = xs
        .iter()
        .map(|&x| reduced_reward(scenario, params, x, false))
        .collect();
    let e_c = params.e_c;

    // Transitions from the s = 0 grid and from a recharge block.
    let from_zero: Vec<Vec<(f64, bool, f64)>> = xs
        .iter()
        .map(|&x| {
            arrivals
                .atoms()
                .iter()
                .map(|a| {
                    (
                        a.prob,
                        a.value > e_c,
                        next_level(scenario, params, x.min(e_c), a.value),
                    )
                })
                .collect()
        })
        .collect();
    let from_one: Vec<(f64, bool, f64)> = arrivals
        .atoms()
        .iter()
        .map(|a| (a.prob, a.value > e_c, next_level(scenario, params, e_c, a.value)))
        .collect();

    let mut j0 = vec![0.0; grid.n];
    let mut c = 0.0;
    for n in 0..horizon {
        let prev = |x: f64, s: bool| {
            if n == 0 {
                0.0
            } else if s {
                reduced_reward(scenario, params, x, true) + c
            } else {
                lerp(&j0, grid.locate(x))
            }
        };
        let expect = |row: &[(f64, bool, f64)]| -> f64 {
            row.iter().map(|&(p, s, x)| p * prev(x, s)).sum()
        };
        let next0: Vec<f64> = from_zero
            .iter()
            .zip(&r0)
            .map(|(row, r)| r + expect(row))
            .collect();
        let next_c = expect(&from_one);
        j0 = next0;
        c = next_c;
    }
    ValueTable {
        horizon,
        x: xs,
        j0,
        recharge_continuation: c,
        e_c,
        battery: cap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub horizon: usize,
    /// `max(Ĵ_N − J_N)` over both branches of the grid.
    pub max_violation: f64,
    pub slack: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const DOMINANCE_TOL: f64 = 1e-6;

fn max_difference(
    scenario: &Scenario,
    params: &PolicyParams,
    orig: &ValueTable,
    modi: &ValueTable,
    n_recharge: usize,
) -> f64 {
    let d0 = modi
        .j0
        .iter()
        .zip(&orig.j0)
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    let r_o = orig.recharge_branch(scenario, params, n_recharge);
    let r_m = modi.recharge_branch(scenario, params, n_recharge);
    let d1 = r_m
        .iter()
        .zip(&r_o)
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max);
    d0.max(d1)
}

/// Largest change of `J_N` at the coarse nodes when the grid is refined to
/// `2n − 1` points (which contains the coarse grid).
fn refinement_slack(
    scenario: &Scenario,
    arrivals: &DiscreteDistribution,
    params: &PolicyParams,
    horizon: usize,
    n_grid: usize,
    coarse: &ValueTable,
) -> f64 {
    let fine = finite_horizon_value(scenario, arrivals, params, horizon, 2 * n_grid - 1);
    let d0 = coarse
        .j0
        .iter()
        .enumerate()
        .map(|(i, v)| (fine.j0[2 * i] - v).abs())
        .fold(0.0, f64::max);
    d0.max((fine.recharge_continuation - coarse.recharge_continuation).abs())
}

/// Compares `J_N` under the original arrivals with `Ĵ_N` under the
/// semi-Bernoulli modification.
pub fn check_dominance(
    scenario: &Scenario,
    params: &PolicyParams,
    horizon: usize,
    n_grid: usize,
) -> Result<DominanceReport, OracleError> {
    let m = modify_semi_bernoulli(scenario, params)?;
    let orig = finite_horizon_value(scenario, scenario.clipped(), params, horizon, n_grid);
    let modi = finite_horizon_value(scenario, m.dist(), params, horizon, n_grid);
    let max_violation = max_difference(scenario, params, &orig, &modi, n_grid);
    let slack = if horizon <= 1 {
        0.0
    } else {
        refinement_slack(scenario, scenario.clipped(), params, horizon, n_grid, &orig).max(
            refinement_slack(scenario, m.dist(), params, horizon, n_grid, &modi),
        )
    };
    let tolerance = DOMINANCE_TOL + slack;
    Ok(DominanceReport {
        horizon,
        max_violation,
        slack,
        tolerance,
        pass: max_violation <= tolerance,
    })
}

/// Largest positive second difference and largest negative first difference
/// of a sampled function (concave and nondecreasing when both are ≤ 0).
pub fn shape_defects(values: &[f64]) -> (f64, f64) {
    let convexity = values
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let decrease = values
        .windows(2)
        .map(|w| w[0] - w[1])
        .fold(f64::NEG_INFINITY, f64::max);
    (convexity, decrease)
}
