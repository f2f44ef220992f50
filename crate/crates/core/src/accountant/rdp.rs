//! Rényi-DP accounting for Gaussian mechanisms.

use serde::{Deserialize, Serialize};

use super::AccountantError;

/// Order grid: dense near 1, every integer up to 64, then geometric steps
/// of 2^(1/4) up to 16384.
pub fn default_alphas() -> Vec<f64> {
    let mut a: Vec<f64> = (1..=20).map(|k| 1.0 + 0.05 * f64::from(k)).collect();
    a.extend((1..=32).map(|k| 2.0 + 0.25 * f64::from(k)));
    a.extend((11..=64).map(f64::from));
    a.extend((1..=32).map(|j| 64.0 * 2f64.powf(f64::from(j) / 4.0)));
    a
}

/// `ε(α)` of the Gaussian mechanism: `α·Δ² / (2σ²)`.
pub fn rdp_of_gaussian(sigma: f64, delta_sensitivity: f64, alpha: f64) -> Result<f64, AccountantError> {
    if !(alpha > 1.0) {
        return Err(AccountantError::InvalidArgument(format!("alpha must exceed 1 (got {alpha})")));
    }
    Ok(alpha * delta_sensitivity * delta_sensitivity / (2.0 * sigma * sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub alphas: Vec<f64>,
    pub eps_of_alpha: Vec<f64>,
}

impl RdpCurve {
    pub fn empty(alphas: Vec<f64>) -> Self {
        let n = alphas.len();
        RdpCurve {
            alphas,
            eps_of_alpha: vec![0.0; n],
        }
    }

    pub fn add_gaussian(&mut self, sigma: f64, delta_sensitivity: f64, times: f64) {
        let unit = delta_sensitivity * delta_sensitivity / (2.0 * sigma * sigma);
        for (e, a) in self.eps_of_alpha.iter_mut().zip(&self.alphas) {
            *e += times * a * unit;
        }
    }

    pub fn add(&mut self, other: &RdpCurve) {
        for (e, o) in self.eps_of_alpha.iter_mut().zip(&other.eps_of_alpha) {
            *e += o;
        }
    }

    pub fn scaled(&self, times: f64) -> RdpCurve {
        RdpCurve {
            alphas: self.alphas.clone(),
            eps_of_alpha: self.eps_of_alpha.iter().map(|e| e * times).collect(),
        }
    }

    /// Tightest `δ` implied at `epsilon` over the order grid.
    pub fn delta_at(&self, epsilon: f64) -> f64 {
        if self.eps_of_alpha.iter().all(|e| *e == 0.0) {
            return 0.0;
        }
        self.alphas
            .iter()
            .zip(&self.eps_of_alpha)
            .map(|(&a, &e)| ((a - 1.0) * (e - epsilon) + (a - 1.0) * (1.0 - 1.0 / a).ln() - a.ln()).exp())
            .fold(1.0, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(rdp_of_gaussian(1.0, 1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_of_gaussian(2.0, 1.0, 2.0).unwrap(), 0.25);
        assert!(rdp_of_gaussian(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn matches_numeric_renyi_divergence() {
        // D_α(N(0,σ²) || N(Δ,σ²)) = 1/(α−1) · ln ∫ p^α q^(1−α), by quadrature.
        for &(sigma, sens, alpha) in &[(1.0, 1.0, 2.0), (2.0, 1.5, 3.5), (3.0, 1.0, 10.0), (1.3, 0.7, 1.25)] {
            let pdf = |x: f64, m: f64| (-(x - m) * (x - m) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
            let (lo, hi, steps) = (-40.0 * sigma, 40.0 * sigma + sens, 400_000);
            let h = (hi - lo) / steps as f64;
            let mut integral = 0.0;
            for i in 0..=steps {
                let x = lo + h * i as f64;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                let p = pdf(x, 0.0);
                let q = pdf(x, sens);
                if p > 0.0 && q > 0.0 {
                    integral += w * (alpha * p.ln() + (1.0 - alpha) * q.ln()).exp();
                }
            }
            let numeric = (integral * h).ln() / (alpha - 1.0);
            let closed = rdp_of_gaussian(sigma, sens, alpha).unwrap();
            assert!((numeric - closed).abs() < 1e-9, "{numeric} vs {closed}");
        }
    }

    #[test]
    fn grid_contains_standard_orders() {
        let a = default_alphas();
        for x in [1.25, 1.5, 2.0, 3.0, 64.0, 128.0, 256.0] {
            assert!(a.iter().any(|v| (v - x).abs() < 1e-9), "{x}");
        }
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn empty_curve_has_zero_delta() {
        let c = RdpCurve::empty(default_alphas());
        assert_eq!(c.delta_at(0.0), 0.0);
    }
}
