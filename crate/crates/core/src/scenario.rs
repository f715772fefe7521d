//! Problem instances: block length `T`, battery capacity `B̄` and the
//! per-block arrival distribution.
//!
//! A [`Scenario`] keeps the arrival law exactly as loaded (sorted, duplicates
//! merged) and a copy clipped at `B̄`. Every downstream computation runs on
//! the clipped law, since an arrival above the capacity refills the battery
//! just like an arrival of exactly `B̄`. The pre-clipping tail `Pr(E > B̄)` is
//! kept as [`Scenario::overflow_tail`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `Σ p = 1` for a [`DiscreteDistribution`].
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Looser tolerance accepted when loading a document; the probabilities are
/// renormalized if they are further than [`PROB_SUM_TOL`] from one.
pub const LOAD_PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("malformed scenario document: {0}")]
    Malformed(String),
    #[error("distribution has no atoms")]
    Empty,
    #[error("probabilities sum to {sum}, expected 1")]
    ProbabilitySum { sum: f64 },
    #[error("arrival value {value} is negative or not finite")]
    InvalidValue { value: f64 },
    #[error("probability {prob} is not in (0, 1]")]
    InvalidProbability { prob: f64 },
    #[error("atom values must be strictly increasing (found {prev} then {next})")]
    Unsorted { prev: f64, next: f64 },
    #[error("block length T must be at least 1 (got {0})")]
    BlockLength(u64),
    #[error("battery capacity B must be positive and finite (got {0})")]
    Battery(f64),
}

/// One support point of an arrival distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Atom {
    pub value: f64,
    pub prob: f64,
}

impl Atom {
    pub fn new(value: f64, prob: f64) -> Self {
        Self { value, prob }
    }
}

/// Finite-support probability mass function of the per-block arrival energy.
///
/// Values are strictly increasing and nonnegative, probabilities are positive
/// and sum to one within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<Atom>,
}

impl DiscreteDistribution {
    /// Builds a distribution from atoms that already satisfy every invariant.
    pub fn new(atoms: Vec<Atom>) -> Result<Self, ScenarioError> {
        if atoms.is_empty() {
            return Err(ScenarioError::Empty);
        }
        for a in &atoms {
            check_atom(a)?;
        }
        for w in atoms.windows(2) {
            if w[1].value <= w[0].value {
                return Err(ScenarioError::Unsorted {
                    prev: w[0].value,
                    next: w[1].value,
                });
            }
        }
        let sum: f64 = atoms.iter().map(|a| a.prob).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(ScenarioError::ProbabilitySum { sum });
        }
        Ok(Self { atoms })
    }

    /// Sorts, merges duplicate values and checks the probability sum against
    /// `sum_tol`. A sum off by more than [`PROB_SUM_TOL`] is renormalized.
    pub fn from_unsorted(mut atoms: Vec<Atom>, sum_tol: f64) -> Result<Self, ScenarioError> {
        if atoms.is_empty() {
            return Err(ScenarioError::Empty);
        }
        for a in &atoms {
            check_atom(a)?;
        }
        atoms.sort_by(|a, b| a.value.total_cmp(&b.value));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match merged.last_mut() {
                Some(last) if last.value == a.value => last.prob += a.prob,
                _ => merged.push(a),
            }
        }
        let sum: f64 = merged.iter().map(|a| a.prob).sum();
        if (sum - 1.0).abs() > sum_tol {
            return Err(ScenarioError::ProbabilitySum { sum });
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            for a in &mut merged {
                a.prob /= sum;
            }
        }
        Self::new(merged)
    }

    /// Point mass at `value`.
    pub fn deterministic(value: f64) -> Result<Self, ScenarioError> {
        Self::new(vec![Atom::new(value, 1.0)])
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.prob * a.value).sum()
    }

    /// `E[min(E, x)]`, evaluated exactly over the support.
    pub fn truncated_mean(&self, x: f64) -> f64 {
        self.atoms.iter().map(|a| a.prob * a.value.min(x)).sum()
    }

    /// `Pr(E > x)`.
    // Folded from +0.0: an empty `sum()` of floats is -0.0.
    pub fn tail_prob(&self, x: f64) -> f64 {
        self.atoms.iter().filter(|a| a.value > x).map(|a| a.prob).fold(0.0, |acc, p| acc + p)
    }

    /// `Pr(E ≤ x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms.iter().filter(|a| a.value <= x).map(|a| a.prob).fold(0.0, |acc, p| acc + p)
    }

    /// `E[E | E ≤ x]`, or zero when `Pr(E ≤ x) = 0`.
    pub fn conditional_mean_at_most(&self, x: f64) -> f64 {
        let (mass, first_moment) = self
            .atoms
            .iter()
            .filter(|a| a.value <= x)
            .fold((0.0, 0.0), |(m, s), a| (m + a.prob, s + a.prob * a.value));
        if mass > 0.0 {
            first_moment / mass
        } else {
            0.0
        }
    }

    pub fn max_value(&self) -> f64 {
        self.atoms.last().map_or(0.0, |a| a.value)
    }

    pub fn min_value(&self) -> f64 {
        self.atoms.first().map_or(0.0, |a| a.value)
    }

    /// Shannon entropy in bits.
    pub fn entropy_bits(&self) -> f64 {
        -self
            .atoms
            .iter()
            .map(|a| a.prob * a.prob.log2())
            .sum::<f64>()
    }

    /// True when all mass sits at zero.
    pub fn is_degenerate(&self) -> bool {
        self.atoms.iter().all(|a| a.value == 0.0)
    }

    /// Expectation of `f` over the support.
    pub fn expect(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.prob * f(a.value)).sum()
    }
}

fn check_atom(a: &Atom) -> Result<(), ScenarioError> {
    if !a.value.is_finite() || a.value < 0.0 {
        return Err(ScenarioError::InvalidValue { value: a.value });
    }
    if !a.prob.is_finite() || a.prob <= 0.0 || a.prob > 1.0 + LOAD_PROB_SUM_TOL {
        return Err(ScenarioError::InvalidProbability { prob: a.prob });
    }
    Ok(())
}

/// Result of clipping a distribution at the battery capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedDistribution {
    pub dist: DiscreteDistribution,
    /// `Pr(E > B̄)` of the input, the `p′` of the upper-bound program.
    pub overflow_tail: f64,
}

/// Replaces every value `v` by `min(v, cap)` and merges the atoms landing on
/// `cap`.
pub fn clip_distribution(dist: &DiscreteDistribution, cap: f64) -> ClippedDistribution {
    let overflow_tail = dist.tail_prob(cap);
    let mut atoms: Vec<Atom> = Vec::with_capacity(dist.len());
    for a in dist.atoms() {
        let v = a.value.min(cap);
        match atoms.last_mut() {
            Some(last) if last.value == v => last.prob += a.prob,
            _ => atoms.push(Atom::new(v, a.prob)),
        }
    }
    ClippedDistribution {
        dist: DiscreteDistribution { atoms },
        overflow_tail,
    }
}

/// Summary statistics of the clipped arrival law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistStats {
    pub mu: f64,
    pub e_max: f64,
    pub entropy_bits: f64,
}

pub fn dist_stats(scenario: &Scenario) -> DistStats {
    let d = scenario.clipped();
    DistStats {
        mu: d.mean(),
        e_max: d.max_value(),
        entropy_bits: d.entropy_bits(),
    }
}

/// The JSON document form: `{"T": <int>, "B": <float>, "arrivals": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    #[serde(rename = "T")]
    pub block_len: u64,
    #[serde(rename = "B")]
    pub battery: f64,
    pub arrivals: Vec<Atom>,
}

/// A validated problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    block_len: u32,
    battery: f64,
    arrivals: DiscreteDistribution,
    clipped: DiscreteDistribution,
    overflow_tail: f64,
}

impl Scenario {
    pub fn new(
        block_len: u32,
        battery: f64,
        arrivals: DiscreteDistribution,
    ) -> Result<Self, ScenarioError> {
        if block_len < 1 {
            return Err(ScenarioError::BlockLength(block_len.into()));
        }
        if !battery.is_finite() || battery <= 0.0 {
            return Err(ScenarioError::Battery(battery));
        }
        let ClippedDistribution {
            dist: clipped,
            overflow_tail,
        } = clip_distribution(&arrivals, battery);
        Ok(Self {
            block_len,
            battery,
            arrivals,
            clipped,
            overflow_tail,
        })
    }

    /// Convenience constructor from `(value, prob)` pairs using the load-time
    /// normalization rules.
    pub fn from_pairs(
        block_len: u32,
        battery: f64,
        pairs: &[(f64, f64)],
    ) -> Result<Self, ScenarioError> {
        let atoms = pairs.iter().map(|&(v, p)| Atom::new(v, p)).collect();
        let dist = DiscreteDistribution::from_unsorted(atoms, LOAD_PROB_SUM_TOL)?;
        Self::new(block_len, battery, dist)
    }

    pub fn from_doc(doc: ScenarioDoc) -> Result<Self, ScenarioError> {
        if doc.block_len < 1 || doc.block_len > u64::from(u32::MAX) {
            return Err(ScenarioError::BlockLength(doc.block_len));
        }
        if !doc.battery.is_finite() || doc.battery <= 0.0 {
            return Err(ScenarioError::Battery(doc.battery));
        }
        let dist = DiscreteDistribution::from_unsorted(doc.arrivals, LOAD_PROB_SUM_TOL)?;
        Self::new(doc.block_len as u32, doc.battery, dist)
    }

    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc =
            serde_json::from_str(text).map_err(|e| ScenarioError::Malformed(e.to_string()))?;
        Self::from_doc(doc)
    }

    pub fn to_doc(&self) -> ScenarioDoc {
        ScenarioDoc {
            block_len: self.block_len.into(),
            battery: self.battery,
            arrivals: self.arrivals.atoms().to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_doc()).expect("scenario documents always serialize")
    }

    /// Same arrival law and block length with a different capacity.
    pub fn with_battery(&self, battery: f64) -> Result<Self, ScenarioError> {
        Self::new(self.block_len, battery, self.arrivals.clone())
    }

    pub fn with_block_len(&self, block_len: u32) -> Result<Self, ScenarioError> {
        Self::new(block_len, self.battery, self.arrivals.clone())
    }

    /// Block length `T` (coherence time in slots).
    pub fn block_len(&self) -> u32 {
        self.block_len
    }

    /// `T` as a float, for arithmetic.
    pub fn t(&self) -> f64 {
        f64::from(self.block_len)
    }

    /// Battery capacity `B̄`.
    pub fn battery(&self) -> f64 {
        self.battery
    }

    /// Arrival law as loaded (values may exceed `B̄`).
    pub fn arrivals(&self) -> &DiscreteDistribution {
        &self.arrivals
    }

    /// Arrival law clipped at `B̄`.
    pub fn clipped(&self) -> &DiscreteDistribution {
        &self.clipped
    }

    /// `Pr(E > B̄)` before clipping.
    pub fn overflow_tail(&self) -> f64 {
        self.overflow_tail
    }

    /// All arrival mass sits at zero; every policy earns nothing.
    pub fn is_degenerate(&self) -> bool {
        self.clipped.is_degenerate()
    }
}

pub fn load_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    Scenario::from_json(text)
}
