//! Exact calibration of the Gaussian mechanism.

use statrs::function::erf::erfc;
use statrs::distribution::{ContinuousCDF, Normal};

use super::MechanismError;

/// Standard normal CDF, accurate in the far lower tail.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `Q(p)`: the point whose upper standard-normal tail has mass `p`.
pub fn upper_normal_quantile(p: f64) -> f64 {
    let n = Normal::standard();
    if p > 0.5 {
        n.inverse_cdf(1.0 - p)
    } else {
        -n.inverse_cdf(p)
    }
}

/// Smallest `δ` for which `N(0, σ²)` noise on a query of L2 sensitivity
/// `delta_sensitivity` is `(ε, δ)`-DP.
pub fn gaussian_delta(epsilon: f64, sigma: f64, delta_sensitivity: f64) -> f64 {
    let r = sigma / delta_sensitivity;
    let a = 1.0 / (2.0 * r);
    let b = epsilon * r;
    let first = normal_cdf(a - b);
    let lower = normal_cdf(-a - b);
    let second = if lower > 0.0 { (epsilon + lower.ln()).exp() } else { 0.0 };
    (first - second).max(0.0)
}

/// Smallest `σ` (relative tolerance 1e-12) such that the Gaussian mechanism
/// with sensitivity `delta_sensitivity` is `(epsilon, delta)`-DP.
///
/// The search runs on `σ/Δ`, so the result scales exactly linearly in `Δ`.
pub fn calibrate_sigma(epsilon: f64, delta: f64, delta_sensitivity: f64) -> Result<f64, MechanismError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MechanismError::InvalidArgument(format!("epsilon must be positive (got {epsilon})")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(MechanismError::InvalidArgument(format!("delta must lie in (0, 1) (got {delta})")));
    }
    if !(delta_sensitivity > 0.0 && delta_sensitivity.is_finite()) {
        return Err(MechanismError::InvalidArgument(format!(
            "sensitivity must be positive (got {delta_sensitivity})"
        )));
    }
    let ok = |r: f64| gaussian_delta(epsilon, r, 1.0) <= delta;
    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(MechanismError::InvalidArgument("no finite sigma meets the target".into()));
        }
    }
    let mut lo = hi / 2.0;
    while ok(lo) {
        hi = lo;
        lo /= 2.0;
        if lo < 1e-12 {
            return Ok(hi * delta_sensitivity);
        }
    }
    for _ in 0..200 {
        if (hi - lo) <= hi * 1e-13 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Undo rounding in hi·Δ/Δ so the returned σ itself passes the check.
    let mut sigma = hi * delta_sensitivity;
    while gaussian_delta(epsilon, sigma, delta_sensitivity) > delta {
        sigma *= 1.0 + 1e-15;
    }
    Ok(sigma)
}
