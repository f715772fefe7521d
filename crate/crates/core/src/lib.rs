//! Online power control for energy-harvesting transmitters with a finite
//! battery and block i.i.d. energy arrivals.
//!
//! The crate is organised bottom-up:
//!
//! - [`scenario`]: problem instances `(T, B̄, P_E)` and their JSON document form.
//! - [`solver`]: the critical energy level `E_c`, the fraction `q`, the
//!   closed-form throughput approximation `θ̄`, throughput and capacity bounds,
//!   and the KKT certificate for the upper-bound program.
//! - [`policies`]: the block fixed-fraction policy and the baselines behind a
//!   per-slot [`policies::Policy`] interface, plus block uniformization.
//! - [`simulator`]: battery dynamics, seeded arrival streams, Monte Carlo
//!   replication and the renewal-reward lower bound.
//! - [`oracle`]: relative value iteration on the reduced MDP, finite-horizon
//!   dynamic programming and the mean-preserving arrival modification.
//!
//! ```
//! use ehpc_core::scenario::Scenario;
//! use ehpc_core::solver;
//!
//! let s = Scenario::from_json(
//!     r#"{"T": 4, "B": 10, "arrivals": [{"value": 0, "prob": 0.5}, {"value": 6, "prob": 0.5}]}"#,
//! ).unwrap();
//! let params = solver::compute_params(&s);
//! assert!((params.e_c - 4.0).abs() < 1e-12);
//! assert!((solver::theta_bar(&s, &params) - 0.9645).abs() < 1e-4);
//! ```

pub mod oracle;
pub mod policies;
pub mod rate;
pub mod scenario;
pub mod simulator;
pub mod solver;

pub use rate::{awgn_rate, HALF_LOG2_E};
pub use scenario::{Atom, DiscreteDistribution, Scenario, ScenarioError};
pub use solver::{BoundsReport, PolicyParams};
