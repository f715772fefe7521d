//! The convex upper-bound program and its closed-form optimality certificate.
//!
//! Everything here uses the natural-log rate `ln(1+g)`; objective values are
//! converted to bits with [`nats_to_bits`] only when reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{compute_params, theta_bar, PolicyParams};
use crate::rate::{awgn_rate, nats_to_bits};
use crate::scenario::Scenario;

/// Stationarity residuals above this fail the certificate.
pub const STATIONARITY_TOL: f64 = 1e-9;
/// Allowed gap between the certified objective and `θ̄`, in bits.
pub const OBJECTIVE_TOL: f64 = 1e-9;
/// Allowed excess of any ascent run over the certified objective, in bits.
pub const ASCENT_TOL: f64 = 1e-7;
pub const ASCENT_STARTS: usize = 50;
const ASCENT_SEED: u64 = 0x6b6b_7421;

/// The maximization over `(γ, β, β₀, {β₁(x)})` whose optimum upper-bounds
/// the throughput of every online policy.
#[derive(Debug, Clone)]
pub struct UpperBoundProgram {
    t: f64,
    battery: f64,
    p: f64,
    p_prime: f64,
    mu_tilde: f64,
    /// Loaded atoms `x` with `E_c < x ≤ B̄` and their probabilities.
    atoms: Vec<(f64, f64)>,
}

/// A point of the program. `beta` is carried explicitly; the equality
/// constraint ties it to the other coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktPoint {
    pub gamma: f64,
    pub beta: f64,
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Duals {
    pub lambda0: f64,
    pub lambda1: Vec<f64>,
    pub nu: f64,
}

/// Partial derivatives of the Lagrangian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LagrangianGradient {
    pub gamma: f64,
    pub beta: f64,
    pub beta0: f64,
    pub beta1: Vec<f64>,
}

impl LagrangianGradient {
    pub fn max_abs(&self) -> f64 {
        self.beta1
            .iter()
            .fold(self.gamma.abs().max(self.beta.abs()).max(self.beta0.abs()), |m, g| {
                m.max(g.abs())
            })
    }
}

impl UpperBoundProgram {
    pub fn new(scenario: &Scenario, params: &PolicyParams) -> Self {
        let b = scenario.battery();
        let atoms = scenario
            .arrivals()
            .atoms()
            .iter()
            .filter(|a| a.value > params.e_c && a.value <= b)
            .map(|a| (a.value, a.prob))
            .collect();
        Self {
            t: scenario.t(),
            battery: b,
            p: params.p,
            p_prime: params.p_prime,
            mu_tilde: params.mu_tilde,
            atoms,
        }
    }

    /// Atoms `x ∈ (E_c, B̄]` that carry a `β₁(x)` variable.
    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    fn weight(&self) -> f64 {
        self.p + (1.0 - self.p) * self.t
    }

    /// `β` implied by the equality constraint.
    pub fn implied_beta(&self, beta0: f64, beta1: &[f64]) -> f64 {
        let s: f64 = self.atoms.iter().zip(beta1).map(|(&(_, px), b1)| px * b1).sum();
        (1.0 - self.p) * beta0 + s + self.p_prime * self.battery
    }

    /// The closed-form optimizer.
    pub fn candidate(&self) -> KktPoint {
        let pb = self.p * self.battery;
        KktPoint {
            gamma: pb,
            beta: pb,
            beta0: 0.0,
            beta1: vec![self.battery; self.atoms.len()],
        }
    }

    fn u(&self, z: &KktPoint) -> f64 {
        self.p * z.gamma + (1.0 - self.p) * (self.t * self.mu_tilde - z.beta0 + z.beta)
    }

    fn w(&self, z: &KktPoint, k: usize) -> f64 {
        self.t * self.atoms[k].0 - z.beta1[k] + z.beta - z.gamma
    }

    /// Objective in nats; `−∞` outside the logarithm's domain.
    pub fn objective(&self, z: &KktPoint) -> f64 {
        let t = self.t;
        let a = self.weight();
        let arg = self.u(z) / a;
        if arg <= -1.0 {
            return f64::NEG_INFINITY;
        }
        let mut val = a / t * arg.ln_1p();
        for (k, &(_, px)) in self.atoms.iter().enumerate() {
            let arg = self.w(z, k) / (t - 1.0);
            if arg <= -1.0 {
                return f64::NEG_INFINITY;
            }
            val += (t - 1.0) / t * px * arg.ln_1p();
        }
        if t > 1.0 {
            val += self.p_prime * (t - 1.0) / t * self.battery.ln_1p();
        }
        val
    }

    pub fn is_feasible(&self, z: &KktPoint, tol: f64) -> bool {
        z.gamma <= z.beta + tol
            && z.beta1.iter().all(|&b1| b1 <= self.battery + tol)
            && (z.beta - self.implied_beta(z.beta0, &z.beta1)).abs() <= tol
    }

    /// Dual values solving stationarity at the candidate point.
    pub fn duals(&self) -> Duals {
        let t = self.t;
        let b = self.battery;
        let a = self.weight();
        let d0 = a + self.p * b + (1.0 - self.p) * t * self.mu_tilde;
        let sum: f64 = self
            .atoms
            .iter()
            .map(|&(x, px)| px / (t - 1.0 + t * x - b))
            .sum();
        let lambda0 = a / t * self.p / d0 - (t - 1.0) / t * sum;
        let nu = -a / (t * d0);
        let lambda1 = self
            .atoms
            .iter()
            .map(|&(x, px)| px * (-nu - (t - 1.0) / (t * (t - 1.0 + t * x - b))))
            .collect();
        Duals {
            lambda0,
            lambda1,
            nu,
        }
    }

    /// Gradient of the objective in nats at `z`, ordered like
    /// [`LagrangianGradient`].
    pub fn objective_gradient(&self, z: &KktPoint) -> LagrangianGradient {
        let t = self.t;
        let a = self.weight();
        let fu = a / (t * (a + self.u(z)));
        let fw: Vec<f64> = (0..self.atoms.len())
            .map(|k| (t - 1.0) / t * self.atoms[k].1 / (t - 1.0 + self.w(z, k)))
            .collect();
        let sw: f64 = fw.iter().sum();
        LagrangianGradient {
            gamma: self.p * fu - sw,
            beta: (1.0 - self.p) * fu + sw,
            beta0: -(1.0 - self.p) * fu,
            beta1: fw.iter().map(|g| -g).collect(),
        }
    }

    pub fn lagrangian_gradient(&self, z: &KktPoint, duals: &Duals) -> LagrangianGradient {
        let g = self.objective_gradient(z);
        LagrangianGradient {
            gamma: g.gamma - duals.lambda0,
            beta: g.beta + duals.lambda0 + duals.nu,
            beta0: g.beta0 - (1.0 - self.p) * duals.nu,
            beta1: g
                .beta1
                .iter()
                .zip(&duals.lambda1)
                .zip(&self.atoms)
                .map(|((gk, l1), &(_, px))| gk - l1 - duals.nu * px)
                .collect(),
        }
    }

    /// Coordinate ascent from random feasible points in the box
    /// `β₀, β₁(x) ∈ [0, B̄]`, `γ ∈ [0, β]`. Returns the best objective in nats.
    pub fn coordinate_ascent(&self, starts: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.atoms.len();
        let b = self.battery;
        (0..starts)
            .map(|_| {
                let beta0 = rng.gen::<f64>() * b;
                let beta1: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * b).collect();
                let beta = self.implied_beta(beta0, &beta1);
                let gamma = rng.gen::<f64>() * beta;
                let start = KktPoint {
                    gamma,
                    beta,
                    beta0,
                    beta1,
                };
                self.ascend(start)
            })
            .collect()
    }

    fn ascend(&self, mut z: KktPoint) -> f64 {
        let b = self.battery;
        let mut best = self.objective(&z);
        for _ in 0..400 {
            let before = best;
            // γ alone
            let hi = z.beta;
            let (g, v) = golden_max(0.0_f64.min(hi), hi, |g| {
                self.objective(&KktPoint { gamma: g, ..z.clone() })
            });
            if v > best {
                z.gamma = g;
                best = v;
            }
            // β₀ and each β₁(x), first with γ fixed, then with γ riding on γ = β
            for coord in 0..=self.atoms.len() {
                for tied in [false, true] {
                    let (lo, hi) = self.coordinate_interval(&z, coord, tied);
                    if hi <= lo {
                        continue;
                    }
                    let eval = |v: f64| {
                        let y = self.with_coordinate(&z, coord, v, tied);
                        self.objective(&y)
                    };
                    let (arg, val) = golden_max(lo, hi, eval);
                    if val > best {
                        z = self.with_coordinate(&z, coord, arg, tied);
                        best = val;
                    }
                }
            }
            debug_assert!(self.is_feasible(&z, 1e-9 * (1.0 + b)));
            if best - before <= 1e-14 * (1.0 + best.abs()) {
                break;
            }
        }
        best
    }

    fn coefficient(&self, coord: usize) -> f64 {
        if coord == 0 {
            1.0 - self.p
        } else {
            self.atoms[coord - 1].1
        }
    }

    fn coordinate_value(&self, z: &KktPoint, coord: usize) -> f64 {
        if coord == 0 {
            z.beta0
        } else {
            z.beta1[coord - 1]
        }
    }

    fn coordinate_interval(&self, z: &KktPoint, coord: usize, tied: bool) -> (f64, f64) {
        let c = self.coefficient(coord);
        if c <= 0.0 {
            return (0.0, 0.0);
        }
        if tied {
            return (0.0, self.battery);
        }
        // keep γ ≤ β while this coordinate moves
        let rest = z.beta - c * self.coordinate_value(z, coord);
        let lo = ((z.gamma - rest) / c).max(0.0);
        (lo, self.battery)
    }

    fn with_coordinate(&self, z: &KktPoint, coord: usize, v: f64, tied: bool) -> KktPoint {
        let mut y = z.clone();
        if coord == 0 {
            y.beta0 = v;
        } else {
            y.beta1[coord - 1] = v;
        }
        y.beta = self.implied_beta(y.beta0, &y.beta1);
        if tied || y.gamma > y.beta {
            y.gamma = y.beta;
        }
        y
    }
}

/// Golden-section search for the maximum of a unimodal function on `[lo, hi]`;
/// the endpoints are compared as well so boundary optima are found exactly.
fn golden_max(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    [(lo, f(lo)), (hi, f(hi)), (mid, f(mid))]
        .into_iter()
        .fold((mid, f64::NEG_INFINITY), |acc, (x, v)| if v > acc.1 { (x, v) } else { acc })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AscentCheck {
    pub starts: usize,
    pub best_objective_bits: f64,
    /// Largest excess of any run over the certified objective, in bits.
    pub max_excess_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktCertificate {
    pub gamma_star: f64,
    pub beta_star: f64,
    pub beta0_star: f64,
    /// `(x, β₁*(x))` for each atom in `(E_c, B̄]`.
    pub beta1_star: Vec<(f64, f64)>,
    pub lambda0: f64,
    pub lambda1: Vec<(f64, f64)>,
    pub nu: f64,
    /// `(variable, |∂L/∂variable|)` at the candidate point.
    pub stationarity_residuals: Vec<(String, f64)>,
    pub objective_value: f64,
    pub theta_bar: f64,
    pub primal_feasible: bool,
    /// `p = 0`: there are no recharge variables and the certificate is trivial.
    pub trivial: bool,
    /// `p′ = 0`: only `λ₀ ≥ 0` is required.
    pub relaxed_lambda0: bool,
    pub ascent: Option<AscentCheck>,
}

impl KktCertificate {
    pub fn max_residual(&self) -> f64 {
        self.stationarity_residuals
            .iter()
            .fold(0.0, |m, (_, r)| m.max(*r))
    }

    pub fn lambda0_ok(&self) -> bool {
        if self.relaxed_lambda0 {
            self.lambda0 >= 0.0
        } else {
            self.lambda0 > 0.0
        }
    }

    pub fn passed(&self) -> bool {
        self.primal_feasible
            && self.lambda0_ok()
            && self.lambda1.iter().all(|&(_, l)| l >= 0.0)
            && self.max_residual() < STATIONARITY_TOL
            && (self.objective_value - self.theta_bar).abs() <= OBJECTIVE_TOL
            && self
                .ascent
                .as_ref()
                .map_or(true, |a| a.max_excess_bits <= ASCENT_TOL)
    }
}

/// Builds the certificate at the closed-form point and cross-checks it with
/// randomized coordinate ascent.
pub fn verify_kkt(scenario: &Scenario) -> KktCertificate {
    let params = compute_params(scenario);
    let program = UpperBoundProgram::new(scenario, &params);
    let point = program.candidate();
    let theta = theta_bar(scenario, &params);
    let trivial = params.p <= 0.0;
    // With p = 0 the overflow term would double count mass already in μ̃
    // whenever E_c = B̄, so the trivial certificate reports C(μ) directly.
    let objective_value = if trivial {
        awgn_rate(scenario.clipped().mean())
    } else {
        nats_to_bits(program.objective(&point))
    };

    let (duals, residuals) = if trivial {
        (
            Duals {
                lambda0: 0.0,
                lambda1: Vec::new(),
                nu: program.duals().nu,
            },
            Vec::new(),
        )
    } else {
        let duals = program.duals();
        let g = program.lagrangian_gradient(&point, &duals);
        let mut r = vec![
            ("gamma".to_string(), g.gamma.abs()),
            ("beta".to_string(), g.beta.abs()),
            ("beta0".to_string(), g.beta0.abs()),
        ];
        for (&(x, _), gk) in program.atoms().iter().zip(&g.beta1) {
            r.push((format!("beta1({x})"), gk.abs()));
        }
        (duals, r)
    };

    let ascent = (!trivial).then(|| {
        let runs = program.coordinate_ascent(ASCENT_STARTS, ASCENT_SEED);
        let best = runs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let best_bits = nats_to_bits(best);
        AscentCheck {
            starts: runs.len(),
            best_objective_bits: best_bits,
            max_excess_bits: best_bits - objective_value,
        }
    });

    let atoms = program.atoms();
    KktCertificate {
        gamma_star: point.gamma,
        beta_star: point.beta,
        beta0_star: point.beta0,
        beta1_star: atoms.iter().map(|&(x, _)| x).zip(point.beta1.iter().copied()).collect(),
        lambda0: duals.lambda0,
        lambda1: atoms.iter().map(|&(x, _)| x).zip(duals.lambda1.iter().copied()).collect(),
        nu: duals.nu,
        stationarity_residuals: residuals,
        objective_value,
        theta_bar: theta,
        // Without regeneration the program collapses to `C(μ)` and there is
        // no point to check.
        primal_feasible: trivial
            || program.is_feasible(&point, 1e-12 * (1.0 + scenario.battery())),
        trivial,
        relaxed_lambda0: trivial || params.p_prime <= 0.0,
        ascent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::awgn_rate;

    fn sc(t: u32, b: f64, pairs: &[(f64, f64)]) -> Scenario {
        Scenario::from_pairs(t, b, pairs).unwrap()
    }

    #[test]
    fn bernoulli_certificate() {
        let s = sc(4, 10.0, &[(0.0, 0.5), (6.0, 0.5)]);
        let c = verify_kkt(&s);
        assert!(c.passed(), "{c:?}");
        assert!(!c.trivial);
        assert!((c.objective_value - 0.9645).abs() < 1e-4);
    }

    #[test]
    fn no_regeneration_is_trivial() {
        let s = sc(3, 5.0, &[(0.0, 0.5), (2.0, 0.5)]);
        let c = verify_kkt(&s);
        assert!(c.trivial);
        assert!(c.passed());
        assert!((c.objective_value - awgn_rate(1.0)).abs() < 1e-12);
    }

    #[test]
    fn lambda0_exceeds_overflow_bound() {
        let s = sc(3, 6.0, &[(0.0, 0.3), (4.0, 0.3), (9.0, 0.4)]);
        let params = compute_params(&s);
        assert!(params.p_prime > 0.0);
        let c = verify_kkt(&s);
        assert!(c.passed(), "{c:?}");
        let bound = params.p_prime
            / (s.t() * (1.0 + (1.0 - params.p) * params.mu_tilde + params.p * params.e_c));
        assert!(c.lambda0 > bound);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = sc(4, 5.0, &[(0.5, 0.3), (3.0, 0.3), (4.5, 0.2), (8.0, 0.2)]);
        let params = compute_params(&s);
        let prog = UpperBoundProgram::new(&s, &params);
        let z = KktPoint {
            gamma: 0.7,
            beta: 1.3,
            beta0: 0.4,
            beta1: vec![2.0; prog.atoms().len()],
        };
        let g = prog.objective_gradient(&z);
        let h = 1e-6;
        let fd = |f: &dyn Fn(f64) -> KktPoint| {
            (prog.objective(&f(h)) - prog.objective(&f(-h))) / (2.0 * h)
        };
        let dg = fd(&|e| KktPoint { gamma: z.gamma + e, ..z.clone() });
        let db = fd(&|e| KktPoint { beta: z.beta + e, ..z.clone() });
        let d0 = fd(&|e| KktPoint { beta0: z.beta0 + e, ..z.clone() });
        assert!((dg - g.gamma).abs() < 1e-8);
        assert!((db - g.beta).abs() < 1e-8);
        assert!((d0 - g.beta0).abs() < 1e-8);
        for k in 0..prog.atoms().len() {
            let dk = fd(&|e| {
                let mut y = z.clone();
                y.beta1[k] += e;
                y
            });
            assert!((dk - g.beta1[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn golden_section_finds_boundary() {
        let (x, v) = golden_max(0.0, 2.0, |x| x);
        assert_eq!((x, v), (2.0, 2.0));
        let (x, _) = golden_max(0.0, 4.0, |x| -(x - 1.0) * (x - 1.0));
        assert!((x - 1.0).abs() < 1e-6);
    }
}
