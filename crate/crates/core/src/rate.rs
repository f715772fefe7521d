//! Rate function and the constants that appear in the bounds.

use std::f64::consts::{E, LN_2, LOG2_E, PI};

/// Gap between the throughput upper and lower bounds, `½·log₂ e` bits.
pub const HALF_LOG2_E: f64 = 0.5 * LOG2_E;

/// AWGN rate `C(g) = ½·log₂(1 + g)` in bits per channel use.
#[inline]
pub fn awgn_rate(g: f64) -> f64 {
    0.5 * g.ln_1p() / LN_2
}

/// `C(g)` in the natural-log normalization `ln(1 + g)`.
#[inline]
pub fn awgn_rate_nats(g: f64) -> f64 {
    g.ln_1p()
}

/// Converts a value in the natural-log normalization back to bits.
#[inline]
pub fn nats_to_bits(v: f64) -> f64 {
    v * HALF_LOG2_E
}

/// `½·log₂(π e² / 2)`, the additive constant in the capacity lower bound.
pub fn capacity_gap_constant() -> f64 {
    0.5 * (PI * E * E / 2.0).log2()
}
