//! Synthetic TPC-H-style tables: customer, orders, lineitem.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{load_dataset, BackendAdapter, BackendError, TableData};
use crate::catalog::{Catalog, ColumnSpec, DataType, ForeignKey, TableSchema};
use crate::mechanisms::ClampBounds;
use crate::Value;

use super::EvalError;

pub const SEGMENTS: [&str; 5] = ["AUTOMOBILE", "BUILDING", "FURNITURE", "HOUSEHOLD", "MACHINERY"];
const PRIORITIES: [&str; 5] = ["1-URGENT", "2-HIGH", "3-MEDIUM", "4-NOT SPECIFIED", "5-LOW"];

fn schemas() -> Vec<TableSchema> {
    use DataType::*;
    vec![
        TableSchema {
            name: "customer".into(),
            columns: vec![
                ColumnSpec::new("c_custkey", Integer),
                ColumnSpec::new("c_name", Text),
                ColumnSpec::new("c_nationkey", Integer),
                ColumnSpec::clamped("c_acctbal", Real, -999.99, 9999.99),
                ColumnSpec::new("c_mktsegment", Text),
            ],
            privacy_unit: Some("c_custkey".into()),
            foreign_keys: vec![],
        },
        TableSchema {
            name: "orders".into(),
            columns: vec![
                ColumnSpec::new("o_orderkey", Integer),
                ColumnSpec::new("o_custkey", Integer),
                ColumnSpec::new("o_orderstatus", Text),
                ColumnSpec::clamped("o_totalprice", Real, 0.0, 600_000.0),
                ColumnSpec::new("o_orderpriority", Text),
            ],
            privacy_unit: Some("o_custkey".into()),
            foreign_keys: vec![ForeignKey {
                column: "o_custkey".into(),
                references_table: "customer".into(),
                references_column: "c_custkey".into(),
            }],
        },
        TableSchema {
            name: "lineitem".into(),
            columns: vec![
                ColumnSpec::new("l_orderkey", Integer),
                ColumnSpec::new("l_linenumber", Integer),
                ColumnSpec::clamped("l_quantity", Real, 1.0, 50.0),
                ColumnSpec::clamped("l_extendedprice", Real, 0.0, 105_000.0),
                ColumnSpec::clamped("l_discount", Real, 0.0, 0.1),
                ColumnSpec::clamped("l_tax", Real, 0.0, 0.08),
            ],
            privacy_unit: None,
            foreign_keys: vec![ForeignKey {
                column: "l_orderkey".into(),
                references_table: "orders".into(),
                references_column: "o_orderkey".into(),
            }],
        },
    ]
}

/// The three tables with their declared clamp ranges. `customer` is keyed
/// by its privacy unit, `orders` carries it directly and `lineitem` reaches
/// it through `orders`.
pub fn tpch_catalog() -> Catalog {
    let mut c = Catalog::new();
    for s in schemas() {
        c.register_table(s).expect("static schema is valid");
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub seed: u64,
    pub customers: usize,
    pub orders: usize,
    pub lineitems: usize,
    /// Target Pearson correlation of `l_extendedprice` and `l_discount`;
    /// zero leaves discounts independent.
    pub target_corr: f64,
}

impl SyntheticDatasetSpec {
    /// A tenth of the usual scale-factor-1 row counts.
    pub fn desk_scale(seed: u64) -> Self {
        SyntheticDatasetSpec {
            seed,
            customers: 15_000,
            orders: 150_000,
            lineitems: 600_000,
            target_corr: 0.3,
        }
    }

    pub fn new(seed: u64, customers: usize, orders: usize, lineitems: usize) -> Self {
        SyntheticDatasetSpec {
            seed,
            customers,
            orders,
            lineitems,
            target_corr: 0.3,
        }
    }

    pub fn with_corr(mut self, target_corr: f64) -> Self {
        self.target_corr = target_corr;
        self
    }

    pub fn check(&self) -> Result<(), EvalError> {
        for (name, n) in [
            ("customers", self.customers),
            ("orders", self.orders),
            ("lineitems", self.lineitems),
        ] {
            if n < 100 {
                return Err(EvalError::Spec(format!("{name} must be at least 100 rows (got {n})")));
            }
        }
        if self.lineitems < self.orders {
            return Err(EvalError::Spec("every order needs at least one line item".into()));
        }
        if !(self.target_corr.abs() < 1.0) {
            return Err(EvalError::Spec(format!(
                "target correlation must lie in (-1, 1) (got {})",
                self.target_corr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub tables: Vec<TableData>,
}

impl Dataset {
    pub fn table(&self, name: &str) -> Option<&TableData> {
        self.tables.iter().find(|t| t.schema.name == name)
    }

    pub fn load_into(&self, adapter: &mut dyn BackendAdapter, catalog: &Catalog) -> Result<(), BackendError> {
        load_dataset(adapter, catalog, &self.tables)
    }

    /// Numeric values of one column, skipping NULLs.
    pub fn column_f64(&self, table: &str, column: &str) -> Vec<f64> {
        let Some(t) = self.table(table) else { return Vec::new() };
        let Some(i) = t.column_index(column) else { return Vec::new() };
        t.rows.iter().filter_map(|r| r[i].as_f64()).collect()
    }

    /// The catalog with every clamp range replaced by the observed extremes
    /// of the data.
    pub fn fitted_catalog(&self) -> Catalog {
        let mut c = Catalog::new();
        for mut s in schemas() {
            let name = s.name.clone();
            for col in &mut s.columns {
                if col.clamp.is_none() {
                    continue;
                }
                let values = self.column_f64(&name, &col.name);
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if lo.is_finite() && hi.is_finite() {
                    let hi = if hi > lo { hi } else { lo + 1.0 };
                    col.clamp = Some(ClampBounds { lo, hi });
                }
            }
            c.register_table(s).expect("static schema is valid");
        }
        c
    }
}

fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Sample Pearson correlation; zero when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Assigns the sorted discounts to rows in the rank order of
/// `sign · price / sd + spread · z`.
fn rank_match(prices: &[f64], sorted_discounts: &[f64], z: &[f64], spread: f64, sign: f64) -> Vec<f64> {
    let n = prices.len() as f64;
    let mean = prices.iter().sum::<f64>() / n;
    let sd = (prices.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let score: Vec<f64> = prices.iter().zip(z).map(|(p, z)| sign * p / sd + spread * z).collect();
    let mut order: Vec<usize> = (0..prices.len()).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; prices.len()];
    for (rank, &row) in order.iter().enumerate() {
        out[row] = sorted_discounts[rank];
    }
    out
}

/// Reorders `discounts` so their correlation with `prices` is within 0.05
/// of `target`. The multiset of discounts is unchanged.
fn reorder_discounts(
    prices: &[f64],
    discounts: &[f64],
    target: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<f64>, EvalError> {
    if target == 0.0 {
        return Ok(discounts.to_vec());
    }
    let mut sorted = discounts.to_vec();
    sorted.sort_by(f64::total_cmp);
    let z: Vec<f64> = (0..prices.len()).map(|_| rng.sample(StandardNormal)).collect();
    let sign = target.signum();
    let goal = target.abs();
    let corr = |spread: f64| sign * pearson(prices, &rank_match(prices, &sorted, &z, spread, sign));

    if corr(0.0) < goal - 0.05 {
        return Err(EvalError::Spec(format!(
            "correlation {target} is out of reach for this data (at most {:.3})",
            corr(0.0)
        )));
    }
    // Correlation falls as the spread grows.
    let (mut lo, mut hi) = (0.0, 1.0);
    while corr(hi) > goal && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    let mut best = (f64::INFINITY, 0.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let c = corr(mid);
        if (c - goal).abs() < best.0 {
            best = ((c - goal).abs(), mid);
        }
        if (c - goal).abs() < 0.002 {
            break;
        }
        if c > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > 0.05 {
        return Err(EvalError::Spec(format!("could not reach correlation {target}")));
    }
    Ok(rank_match(prices, &sorted, &z, best.1, sign))
}

/// Builds the three tables. Identical specs give identical tables.
pub fn generate_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset, EvalError> {
    spec.check()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let schemas = schemas();

    let mut customers = Vec::with_capacity(spec.customers);
    for key in 1..=spec.customers as i64 {
        customers.push(vec![
            Value::Int(key),
            Value::Text(format!("Customer#{key:09}")),
            Value::Int(rng.random_range(0..25)),
            Value::Real(f64::from(rng.random_range(-99_999..=999_999)) / 100.0),
            Value::Text(SEGMENTS[rng.random_range(0..SEGMENTS.len())].to_string()),
        ]);
    }

    // Line items per order: an even share plus one for a random subset.
    let base = spec.lineitems / spec.orders;
    let mut extra = vec![false; spec.orders];
    for e in extra.iter_mut().take(spec.lineitems % spec.orders) {
        *e = true;
    }
    extra.shuffle(&mut rng);

    let mut order_custkey = Vec::with_capacity(spec.orders);
    let mut lines: Vec<(i64, i64, f64, f64, f64, f64)> = Vec::with_capacity(spec.lineitems);
    for (o, &plus) in extra.iter().enumerate() {
        order_custkey.push(rng.random_range(1..=spec.customers as i64));
        for line in 1..=(base + usize::from(plus)) as i64 {
            let qty = f64::from(rng.random_range(1..=50));
            let unit = f64::from(rng.random_range(90_000..=209_900)) / 100.0;
            let discount = f64::from(rng.random_range(0..=10)) / 100.0;
            let tax = f64::from(rng.random_range(0..=8)) / 100.0;
            lines.push((o as i64 + 1, line, qty, cents(qty * unit), discount, tax));
        }
    }

    let prices: Vec<f64> = lines.iter().map(|l| l.3).collect();
    let discounts: Vec<f64> = lines.iter().map(|l| l.4).collect();
    let discounts = reorder_discounts(&prices, &discounts, spec.target_corr, &mut rng)?;

    let mut totals = vec![0.0; spec.orders];
    let mut lineitem = Vec::with_capacity(lines.len());
    for (l, d) in lines.iter().zip(&discounts) {
        totals[(l.0 - 1) as usize] += l.3 * (1.0 - d) * (1.0 + l.5);
        lineitem.push(vec![
            Value::Int(l.0),
            Value::Int(l.1),
            Value::Real(l.2),
            Value::Real(l.3),
            Value::Real(*d),
            Value::Real(l.5),
        ]);
    }

    let mut orders = Vec::with_capacity(spec.orders);
    for (o, &cust) in order_custkey.iter().enumerate() {
        let status = match rng.random_range(0..100) {
            0..49 => "F",
            49..98 => "O",
            _ => "P",
        };
        orders.push(vec![
            Value::Int(o as i64 + 1),
            Value::Int(cust),
            Value::Text(status.into()),
            Value::Real(cents(totals[o])),
            Value::Text(PRIORITIES[rng.random_range(0..PRIORITIES.len())].into()),
        ]);
    }

    let mut schemas = schemas.into_iter();
    let mut next = |rows| TableData {
        schema: schemas.next().expect("three schemas"),
        rows,
    };
    Ok(Dataset {
        spec: *spec,
        tables: vec![next(customers), next(orders), next(lineitem)],
    })
}
