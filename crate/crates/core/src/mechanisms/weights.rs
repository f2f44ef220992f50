//! Budget weights over the noisy quantities of a quadratic estimator.
//!
//! Under the Gaussian mechanism the noise scale of a quantity is roughly
//! proportional to `Δ_i / ε_i`. With `ε_i = w_i·ε`, the delta-method MSE of
//! the estimator is proportional to `Σ (g_i Δ_i)² / w_i²`, where `g_i` is the
//! partial derivative of the estimator with respect to quantity `i`. The
//! minimizer is found by exhaustive search over a 0.01 simplex grid.

use serde::{Deserialize, Serialize};

use super::{sensitivity_for, AggregateKind, ClampBounds, ContributionCaps, MechanismError, MomentSet};

const GRID: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorWeights(pub Vec<f64>);

impl EstimatorWeights {
    pub fn uniform(len: usize) -> Self {
        EstimatorWeights(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn check(&self) -> Result<(), MechanismError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w > 0.0 && *w < 1.0 || self.0.len() == 1 && *w == 1.0))
            || (sum - 1.0).abs() > 1e-12
        {
            return Err(MechanismError::InvalidArgument(format!("invalid estimator weights {:?}", self.0)));
        }
        Ok(())
    }
}

/// A data-independent pilot: one value at the mean of a uniform distribution
/// on the bounds. The weights only depend on ratios of the gradients, and
/// those are invariant in `n`.
pub fn pilot_from_bounds(bounds: &[ClampBounds]) -> MomentSet {
    let mean = |b: &ClampBounds| 0.5 * (b.lo + b.hi);
    let second = |b: &ClampBounds| (b.lo * b.lo + b.lo * b.hi + b.hi * b.hi) / 3.0;
    let Some(x) = bounds.first() else {
        return MomentSet {
            n: 1,
            ..MomentSet::default()
        };
    };
    let y = bounds.get(1);
    MomentSet {
        n: 1,
        s1: mean(x),
        s2: second(x),
        sy: y.map(mean),
        sxy: y.map(|y| mean(x) * mean(y)),
    }
}

/// Gradient of the estimator with respect to its quantities at `pilot`.
fn gradient(kind: AggregateKind, pilot: &MomentSet) -> Vec<f64> {
    let n = pilot.n as f64;
    match kind {
        AggregateKind::Covar => {
            let sx = pilot.s1;
            let sy = pilot.sy.unwrap_or(0.0);
            let sxy = pilot.sxy.unwrap_or(0.0);
            vec![
                -sxy / (n * n) + 2.0 * sx * sy / (n * n * n),
                -sy / (n * n),
                -sx / (n * n),
                1.0 / n,
            ]
        }
        // STDDEV differs from VAR by a common factor, which does not move the
        // minimizer.
        _ => vec![
            -pilot.s2 / (n * n) + 2.0 * pilot.s1 * pilot.s1 / (n * n * n),
            -2.0 * pilot.s1 / (n * n),
            1.0 / n,
        ],
    }
}

/// First-order MSE proxy `Σ c_i / w_i²` with `c_i = (g_i Δ_i)²`.
pub fn objective(coefficients: &[f64], weights: &[f64]) -> f64 {
    coefficients.iter().zip(weights).map(|(c, w)| c / (w * w)).sum()
}

pub fn optimize_weights(
    kind: AggregateKind,
    bounds: &[ClampBounds],
    caps: ContributionCaps,
    pilot: &MomentSet,
) -> Result<EstimatorWeights, MechanismError> {
    if !kind.is_quadratic() {
        return Err(MechanismError::NotQuadratic(kind.name()));
    }
    let quantities = kind.quantities();
    if pilot.n == 0 {
        return Ok(EstimatorWeights::uniform(quantities.len()));
    }
    let grad = gradient(kind, pilot);
    let mut coefficients = Vec::with_capacity(quantities.len());
    for (q, g) in quantities.iter().zip(&grad) {
        let delta = sensitivity_for(*q, bounds, caps)?.per_partition_l2;
        coefficients.push((g * delta).powi(2));
    }
    Ok(grid_minimize(&coefficients))
}

/// Exhaustive search over weights in `{0.01, …, 0.99}` summing to one.
/// Ties (relative 1e-12) go to the point closest to uniform, then to the
/// lexicographically smallest.
fn grid_minimize(coefficients: &[f64]) -> EstimatorWeights {
    let d = coefficients.len();
    let uniform = 1.0 / d as f64;
    let mut best: Option<(f64, f64, Vec<u32>)> = None;
    let mut current = vec![0u32; d];
    visit(&mut current, 0, GRID, &mut |point| {
        let w: Vec<f64> = point.iter().map(|&k| f64::from(k) / f64::from(GRID)).collect();
        let value = objective(coefficients, &w);
        let dist: f64 = w.iter().map(|x| (x - uniform).abs()).sum();
        let better = match &best {
            None => true,
            Some((bv, bd, bp)) => {
                let tol = 1e-12 * bv.abs().max(value.abs());
                if value < bv - tol {
                    true
                } else if value <= bv + tol {
                    dist < bd - 1e-12 || ((dist - bd).abs() <= 1e-12 && point < bp.as_slice())
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((value, dist, point.to_vec()));
        }
    });
    let (_, _, point) = best.expect("grid is nonempty");
    EstimatorWeights(point.iter().map(|&k| f64::from(k) / f64::from(GRID)).collect())
}

fn visit(current: &mut [u32], index: usize, remaining: u32, f: &mut impl FnMut(&[u32])) {
    let d = current.len();
    if index == d - 1 {
        current[index] = remaining;
        f(current);
        return;
    }
    let slots_after = (d - index - 1) as u32;
    for k in 1..=remaining.saturating_sub(slots_after) {
        current[index] = k;
        visit(current, index + 1, remaining - k, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps() -> ContributionCaps {
        ContributionCaps {
            rows_per_partition: 1,
            partitions: 1,
            distinct_values: 1,
        }
    }

    #[test]
    fn symmetric_coefficients_give_symmetric_weights() {
        let w = grid_minimize(&[1.0, 8.0, 8.0]);
        assert_eq!(w.0[1], w.0[2]);
        // Continuous optimum w ∝ c^(1/3) = (1, 2, 2)/5 lies on the grid.
        assert!((w.0[0] - 0.2).abs() < 1e-12 && (w.0[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn degenerate_pilot_is_uniform() {
        let b = [ClampBounds::new(0.0, 1.0).unwrap()];
        let w = optimize_weights(AggregateKind::Var, &b, caps(), &MomentSet::default()).unwrap();
        assert_eq!(w, EstimatorWeights::uniform(3));
    }

    #[test]
    fn flat_objective_prefers_uniform() {
        let w = grid_minimize(&[0.0, 0.0, 0.0]);
        assert_eq!(w.0, vec![0.33, 0.33, 0.34]);
    }

    #[test]
    fn non_quadratic_rejected() {
        assert!(optimize_weights(AggregateKind::Sum, &[], caps(), &MomentSet::default()).is_err());
    }

    #[test]
    fn weights_are_valid() {
        let b = [ClampBounds::new(-1000.0, 10000.0).unwrap(), ClampBounds::new(0.0, 0.1).unwrap()];
        for kind in [AggregateKind::Var, AggregateKind::Stddev, AggregateKind::Covar] {
            let w = optimize_weights(kind, &b, caps(), &pilot_from_bounds(&b)).unwrap();
            w.check().unwrap();
            assert_eq!(w.0.len(), kind.quantities().len());
        }
    }
}
