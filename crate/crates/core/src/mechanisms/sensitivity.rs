//! Clamping and per-aggregate sensitivity under add/remove-one-user adjacency.

use serde::{Deserialize, Serialize};

use super::MechanismError;

/// Closed interval every value of a column is projected into before
/// aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ClampBounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, MechanismError> {
        let b = ClampBounds { lo, hi };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<(), MechanismError> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(MechanismError::InvalidBounds(format!(
                "clamp bounds must be finite (got [{}, {}])",
                self.lo, self.hi
            )));
        }
        if self.lo > self.hi {
            return Err(MechanismError::InvalidBounds(format!(
                "clamp lower bound {} exceeds upper bound {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    /// Largest absolute value inside the interval.
    pub fn max_abs(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Largest square of a value inside the interval.
    pub fn max_square(&self) -> f64 {
        let m = self.max_abs();
        m * m
    }

    /// Smallest square of a value inside the interval (0 when it straddles 0).
    pub fn min_square(&self) -> f64 {
        if self.lo <= 0.0 && self.hi >= 0.0 {
            0.0
        } else {
            let m = self.lo.abs().min(self.hi.abs());
            m * m
        }
    }
}

pub fn clamp(x: f64, b: ClampBounds) -> f64 {
    x.max(b.lo).min(b.hi)
}

/// Contribution caps taken from the privacy policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContributionCaps {
    /// Rows one user may contribute to one partition.
    pub rows_per_partition: u32,
    /// Partitions one user may contribute to.
    pub partitions: u32,
    /// Distinct values one user may contribute to a COUNT DISTINCT.
    pub distinct_values: u32,
}

/// The individual noisy quantities an aggregate is assembled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Row count.
    Count,
    /// Capped count of distinct values.
    Distinct,
    /// Sum of the (first) argument.
    Sum,
    /// Sum of the second argument of a two-argument aggregate.
    SumY,
    /// Sum of squares.
    SumSquares,
    /// Sum of cross products.
    CrossProducts,
}

impl Quantity {
    pub fn label(self) -> &'static str {
        match self {
            Quantity::Count => "n",
            Quantity::Distinct => "distinct",
            Quantity::Sum => "s1",
            Quantity::SumY => "s1y",
            Quantity::SumSquares => "s2",
            Quantity::CrossProducts => "sxy",
        }
    }
}

/// Sensitivity of one noisy quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    /// Number of partitions a single user can affect.
    pub l0: u32,
    /// Worst-case change of the quantity inside one partition.
    pub per_partition_l2: f64,
    /// L2 norm of the change across all affected partitions.
    pub global_l2: f64,
}

impl SensitivityProfile {
    pub fn new(l0: u32, per_partition_l2: f64) -> Self {
        SensitivityProfile {
            l0,
            per_partition_l2,
            global_l2: f64::from(l0).sqrt() * per_partition_l2,
        }
    }
}

/// Per-partition sensitivity of `quantity` given the clamp bounds of the
/// aggregate's argument(s).
///
/// `bounds[0]` is the first argument and `bounds[1]` the second (only for
/// two-argument aggregates).
pub fn sensitivity_for(
    quantity: Quantity,
    bounds: &[ClampBounds],
    caps: ContributionCaps,
) -> Result<SensitivityProfile, MechanismError> {
    let rows = f64::from(caps.rows_per_partition);
    let first = || {
        bounds
            .first()
            .copied()
            .ok_or(MechanismError::MissingBounds(quantity.label()))
    };
    let per_partition = match quantity {
        Quantity::Count => rows,
        Quantity::Distinct => f64::from(caps.distinct_values),
        Quantity::Sum => rows * first()?.max_abs(),
        Quantity::SumSquares => rows * first()?.max_square(),
        Quantity::SumY => {
            let b = bounds.get(1).copied().ok_or(MechanismError::MissingBounds(quantity.label()))?;
            rows * b.max_abs()
        }
        Quantity::CrossProducts => {
            let x = first()?;
            let y = bounds.get(1).copied().ok_or(MechanismError::MissingBounds(quantity.label()))?;
            rows * max_corner_product(x, y)
        }
    };
    Ok(SensitivityProfile::new(caps.partitions, per_partition))
}

/// Largest `|x * y|` over the box `x ∈ bx, y ∈ by`; attained at a corner.
pub fn max_corner_product(bx: ClampBounds, by: ClampBounds) -> f64 {
    [bx.lo * by.lo, bx.lo * by.hi, bx.hi * by.lo, bx.hi * by.hi]
        .into_iter()
        .map(f64::abs)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn caps(rows: u32, parts: u32) -> ContributionCaps {
        ContributionCaps {
            rows_per_partition: rows,
            partitions: parts,
            distinct_values: 1,
        }
    }

    #[test]
    fn clamp_examples() {
        let b = ClampBounds::new(0.0, 100.0).unwrap();
        assert_eq!(clamp(150.0, b), 100.0);
        assert_eq!(clamp(50.0, b), 50.0);
        assert_eq!(clamp(-3.0, b), 0.0);
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(ClampBounds::new(2.0, 1.0).is_err());
        assert!(ClampBounds::new(f64::NAN, 1.0).is_err());
        assert!(ClampBounds::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn count_single_row_single_partition() {
        let s = sensitivity_for(Quantity::Count, &[], caps(1, 1)).unwrap();
        assert_eq!(s.per_partition_l2, 1.0);
        assert_eq!(s.global_l2, 1.0);
    }

    #[test]
    fn sum_scales_with_rows_and_partitions() {
        let b = ClampBounds::new(0.0, 10.0).unwrap();
        let s = sensitivity_for(Quantity::Sum, &[b], caps(3, 4)).unwrap();
        assert_eq!(s.per_partition_l2, 30.0);
        assert_eq!(s.global_l2, 60.0);
    }

    #[test]
    fn cross_product_uses_worst_corner() {
        let x = ClampBounds::new(-1.0, 2.0).unwrap();
        let y = ClampBounds::new(-3.0, 1.0).unwrap();
        // Brute force over a dense grid of the box agrees with the corner rule.
        let mut brute: f64 = 0.0;
        for i in 0..=300 {
            for j in 0..=400 {
                let xv = -1.0 + 3.0 * f64::from(i) / 300.0;
                let yv = -3.0 + 4.0 * f64::from(j) / 400.0;
                brute = brute.max((xv * yv).abs());
            }
        }
        let s = sensitivity_for(Quantity::CrossProducts, &[x, y], caps(1, 1)).unwrap();
        assert_eq!(s.per_partition_l2, 6.0);
        assert!((brute - 6.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_quantities_need_bounds() {
        assert!(matches!(
            sensitivity_for(Quantity::Sum, &[], caps(1, 1)),
            Err(MechanismError::MissingBounds(_))
        ));
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(x in -1e6f64..1e6, lo in -1e3f64..1e3, w in 0f64..1e3) {
            let b = ClampBounds::new(lo, lo + w).unwrap();
            let once = clamp(x, b);
            prop_assert_eq!(clamp(once, b), once);
            prop_assert!(once >= b.lo && once <= b.hi);
        }

        #[test]
        fn sensitivity_monotone_in_caps_and_bounds(
            rows in 1u32..20, parts in 1u32..20, extra_rows in 0u32..5, extra_parts in 0u32..5,
            lo in -100f64..0.0, hi in 0f64..100.0, grow in 0f64..50.0,
        ) {
            let small_b = [ClampBounds::new(lo, hi).unwrap(), ClampBounds::new(lo, hi).unwrap()];
            let big_b = [ClampBounds::new(lo - grow, hi + grow).unwrap(), ClampBounds::new(lo - grow, hi + grow).unwrap()];
            for q in [Quantity::Count, Quantity::Sum, Quantity::SumY, Quantity::SumSquares, Quantity::CrossProducts, Quantity::Distinct] {
                let a = sensitivity_for(q, &small_b, caps(rows, parts)).unwrap();
                let b = sensitivity_for(q, &big_b, caps(rows + extra_rows, parts + extra_parts)).unwrap();
                prop_assert!(b.per_partition_l2 >= a.per_partition_l2);
                prop_assert!(b.global_l2 >= a.global_l2);
                prop_assert!(b.l0 >= a.l0);
            }
        }
    }
}
