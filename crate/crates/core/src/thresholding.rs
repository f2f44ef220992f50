//! Double thresholding: a group is released only when its exact number of
//! distinct users reaches `k` and its noisy user count clears `τ`.

use serde::Serialize;
use thiserror::Error;

use crate::mechanisms::upper_normal_quantile;
use crate::Value;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionStats {
    pub key: Vec<Value>,
    pub exact_distinct_users: u64,
    pub clamped_count: u64,
    pub noisy_count: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdParams {
    pub k: u32,
    pub tau: f64,
    pub sigma_count: f64,
    pub delta_threshold: f64,
    pub c_part: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThresholdError {
    #[error("delta_threshold must lie in (0, 1) (got {0})")]
    Delta(String),
    #[error("{0}")]
    Invalid(String),
}

/// `τ = k + σ·Q(δ_t / C_part)`, never below `k`.
///
/// One user influences at most `C_part` partitions; a union bound over them
/// keeps the chance that the noisy test reveals a user-dependent key below
/// `δ_t`.
pub fn calibrate_tau(k: u32, sigma_count: f64, delta_threshold: f64, c_part: u32) -> Result<f64, ThresholdError> {
    if !(delta_threshold > 0.0 && delta_threshold < 1.0) {
        return Err(ThresholdError::Delta(delta_threshold.to_string()));
    }
    if k < 1 || c_part < 1 {
        return Err(ThresholdError::Invalid("k and c_part must be ≥ 1".into()));
    }
    if !(sigma_count > 0.0 && sigma_count.is_finite()) {
        return Err(ThresholdError::Invalid(format!("sigma_count must be positive (got {sigma_count})")));
    }
    let q = upper_normal_quantile(delta_threshold / f64::from(c_part));
    Ok((f64::from(k) + sigma_count * q).max(f64::from(k)))
}

impl ThresholdParams {
    pub fn new(k: u32, sigma_count: f64, delta_threshold: f64, c_part: u32) -> Result<Self, ThresholdError> {
        Ok(ThresholdParams {
            k,
            tau: calibrate_tau(k, sigma_count, delta_threshold, c_part)?,
            sigma_count,
            delta_threshold,
            c_part,
        })
    }

    /// Only the exact `k` rule applies; every key with `k` users is released.
    /// Used by diagnostics and the noiseless benchmark setting.
    pub fn exact_only(k: u32, c_part: u32) -> Self {
        ThresholdParams {
            k,
            tau: f64::NEG_INFINITY,
            sigma_count: 0.0,
            delta_threshold: 0.0,
            c_part,
        }
    }

    pub fn admits(&self, exact_distinct_users: u64, noisy_count: f64) -> bool {
        exact_distinct_users >= u64::from(self.k) && noisy_count >= self.tau
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdOutcome {
    /// Indices into the input, in input order.
    pub released: Vec<usize>,
    pub suppressed: usize,
}

/// Partitions without a noisy count are suppressed.
pub fn apply_double_threshold(stats: &[PartitionStats], params: &ThresholdParams) -> ThresholdOutcome {
    let released: Vec<usize> = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.noisy_count.is_some_and(|c| params.admits(s.exact_distinct_users, c)))
        .map(|(i, _)| i)
        .collect();
    ThresholdOutcome {
        suppressed: stats.len() - released.len(),
        released,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stat(exact: u64, noisy: f64) -> PartitionStats {
        PartitionStats {
            key: vec![Value::Int(exact as i64)],
            exact_distinct_users: exact,
            clamped_count: exact,
            noisy_count: Some(noisy),
        }
    }

    #[test]
    fn tau_at_half_is_k() {
        assert_eq!(calibrate_tau(1, 1.0, 0.5, 1).unwrap(), 1.0);
    }

    #[test]
    fn tau_against_quantile_oracle() {
        // Q(1e-6) = 4.753424308822899 (high-precision reference value).
        let tau = calibrate_tau(1, 2.0, 1e-6, 1).unwrap();
        assert!((tau - (1.0 + 2.0 * 4.753_424_308_822_899)).abs() < 1e-8, "{tau}");
    }

    #[test]
    fn tau_linear_in_sigma() {
        let a = calibrate_tau(3, 1.5, 1e-5, 2).unwrap() - 3.0;
        let b = calibrate_tau(3, 3.0, 1e-5, 2).unwrap() - 3.0;
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn bad_delta_rejected() {
        assert!(calibrate_tau(1, 1.0, 1.0, 1).is_err());
        assert!(calibrate_tau(1, 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn exact_rule_dominates() {
        let p = ThresholdParams::exact_only(1, 1);
        let out = apply_double_threshold(&[stat(0, 1e9)], &p);
        assert!(out.released.is_empty());
        assert_eq!(out.suppressed, 1);
    }

    #[test]
    fn noisy_rule_applies() {
        let p = ThresholdParams::new(3, 1.0, 1e-6, 1).unwrap();
        let out = apply_double_threshold(&[stat(5, p.tau - 0.1)], &p);
        assert!(out.released.is_empty());
    }

    #[test]
    fn degenerate_threshold_releases_nonempty() {
        let p = ThresholdParams::exact_only(1, 1);
        let stats = [stat(1, -50.0), stat(0, 3.0), stat(7, 0.0)];
        assert_eq!(apply_double_threshold(&stats, &p).released, vec![0, 2]);
    }

    proptest! {
        #[test]
        fn never_releases_below_k(
            users in proptest::collection::vec((0u64..10, -20f64..20.0), 0..50),
            k in 1u32..6, sigma in 0.1f64..5.0,
        ) {
            let p = ThresholdParams::new(k, sigma, 1e-3, 1).unwrap();
            let stats: Vec<_> = users.iter().map(|&(e, n)| stat(e, n)).collect();
            for i in apply_double_threshold(&stats, &p).released {
                prop_assert!(stats[i].exact_distinct_users >= u64::from(k));
            }
        }

        #[test]
        fn raising_thresholds_is_monotone(
            users in proptest::collection::vec((0u64..10, -20f64..20.0), 0..50),
            k in 1u32..5, dk in 0u32..3, tau in -5f64..10.0, dtau in 0f64..5.0,
        ) {
            let stats: Vec<_> = users.iter().map(|&(e, n)| stat(e, n)).collect();
            let mut low = ThresholdParams::exact_only(k, 1);
            low.tau = tau;
            let mut high = low;
            high.k += dk;
            high.tau += dtau;
            let lo = apply_double_threshold(&stats, &low).released;
            for i in apply_double_threshold(&stats, &high).released {
                prop_assert!(lo.contains(&i));
            }
        }
    }
}
