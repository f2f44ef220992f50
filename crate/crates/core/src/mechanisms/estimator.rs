//! Aggregates released as post-processed functions of noisy moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MechanismError, NoiseSpec, Quantity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AggregateKind {
    Count,
    CountDistinct,
    Sum,
    Avg,
    Var,
    Stddev,
    Covar,
}

impl AggregateKind {
    pub fn name(self) -> &'static str {
        match self {
            AggregateKind::Count => "COUNT",
            AggregateKind::CountDistinct => "COUNT_DISTINCT",
            AggregateKind::Sum => "SUM",
            AggregateKind::Avg => "AVG",
            AggregateKind::Var => "VAR",
            AggregateKind::Stddev => "STDDEV",
            AggregateKind::Covar => "COVAR",
        }
    }

    /// Noisy quantities the estimator is built from, in release order.
    pub fn quantities(self) -> &'static [Quantity] {
        use Quantity::*;
        match self {
            AggregateKind::Count => &[Count],
            AggregateKind::CountDistinct => &[Distinct],
            AggregateKind::Sum => &[Sum],
            AggregateKind::Avg => &[Count, Sum],
            AggregateKind::Var | AggregateKind::Stddev => &[Count, Sum, SumSquares],
            AggregateKind::Covar => &[Count, Sum, SumY, CrossProducts],
        }
    }

    pub fn is_quadratic(self) -> bool {
        matches!(self, AggregateKind::Var | AggregateKind::Stddev | AggregateKind::Covar)
    }

    /// Number of column arguments.
    pub fn arity(self) -> usize {
        match self {
            AggregateKind::Count => 0,
            AggregateKind::Covar => 2,
            _ => 1,
        }
    }
}

/// Clamped moments of one aggregate's argument(s) over a partition.
///
/// For `COUNT_DISTINCT`, `n` holds the capped number of distinct values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentSet {
    pub n: u64,
    pub s1: f64,
    pub s2: f64,
    /// Sum of the second argument (two-argument aggregates only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sxy: Option<f64>,
}

impl MomentSet {
    /// Moments of a list of (already clamped) values.
    pub fn of(values: &[f64]) -> Self {
        MomentSet {
            n: values.len() as u64,
            s1: values.iter().sum(),
            s2: values.iter().map(|v| v * v).sum(),
            sy: None,
            sxy: None,
        }
    }

    /// Moments of a list of (already clamped) pairs.
    pub fn of_pairs(pairs: &[(f64, f64)]) -> Self {
        MomentSet {
            n: pairs.len() as u64,
            s1: pairs.iter().map(|p| p.0).sum(),
            s2: pairs.iter().map(|p| p.0 * p.0).sum(),
            sy: Some(pairs.iter().map(|p| p.1).sum()),
            sxy: Some(pairs.iter().map(|p| p.0 * p.1).sum()),
        }
    }

    pub fn add(&mut self, other: &MomentSet) {
        self.n += other.n;
        self.s1 += other.s1;
        self.s2 += other.s2;
        self.sy = sum_opt(self.sy, other.sy);
        self.sxy = sum_opt(self.sxy, other.sxy);
    }

    /// Exact value of `quantity`.
    pub fn get(&self, quantity: Quantity) -> Option<f64> {
        match quantity {
            Quantity::Count | Quantity::Distinct => Some(self.n as f64),
            Quantity::Sum => Some(self.s1),
            Quantity::SumSquares => Some(self.s2),
            Quantity::SumY => self.sy,
            Quantity::CrossProducts => self.sxy,
        }
    }
}

fn sum_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (None, None) => None,
        (a, b) => Some(a.unwrap_or(0.0) + b.unwrap_or(0.0)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    /// Noisy quantities, aligned with [`AggregateKind::quantities`].
    pub noisy: Vec<f64>,
}

/// Releases `kind` from `moments`, adding noise `specs[i]` to the i-th
/// quantity of the kind.
pub fn estimate<R: Rng + ?Sized>(
    kind: AggregateKind,
    moments: &MomentSet,
    specs: &[NoiseSpec],
    rng: &mut R,
) -> Result<Estimate, MechanismError> {
    let quantities = kind.quantities();
    if specs.len() != quantities.len() {
        return Err(MechanismError::NoiseArity {
            kind: kind.name(),
            expected: quantities.len(),
            got: specs.len(),
        });
    }
    let exact = exact_quantities(kind, moments)?;
    let noisy: Vec<f64> = exact
        .iter()
        .zip(specs)
        .map(|(x, spec)| spec.privatize(*x, rng))
        .collect();
    Ok(Estimate {
        value: combine(kind, &noisy),
        noisy,
    })
}

/// The deterministic statistic on clamped data: the estimator with no noise.
pub fn plug_in(kind: AggregateKind, moments: &MomentSet) -> Result<f64, MechanismError> {
    Ok(combine(kind, &exact_quantities(kind, moments)?))
}

fn exact_quantities(kind: AggregateKind, moments: &MomentSet) -> Result<Vec<f64>, MechanismError> {
    kind.quantities()
        .iter()
        .map(|q| {
            moments.get(*q).ok_or(MechanismError::MissingMoment {
                kind: kind.name(),
                what: q.label(),
            })
        })
        .collect()
}

fn combine(kind: AggregateKind, q: &[f64]) -> f64 {
    let var = |q: &[f64]| {
        let m = q[0].max(1.0);
        q[2] / m - (q[1] / m).powi(2)
    };
    match kind {
        AggregateKind::Count | AggregateKind::CountDistinct | AggregateKind::Sum => q[0],
        AggregateKind::Avg => q[1] / q[0].max(1.0),
        AggregateKind::Var => var(q),
        AggregateKind::Stddev => var(q).max(0.0).sqrt(),
        AggregateKind::Covar => {
            let m = q[0].max(1.0);
            q[3] / m - (q[1] / m) * (q[2] / m)
        }
    }
}
