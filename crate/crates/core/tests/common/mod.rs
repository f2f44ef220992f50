//! Helpers shared by the integration tests: a brute-force evaluator of the
//! benchmark workload written directly against the generated rows, and
//! engine builders.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use dpsql::backend::{BackendAdapter, BackendError, Capabilities, MemoryAdapter, RowSet, SqliteAdapter, TableData};
use dpsql::catalog::{AccountantKind, Catalog, GlobalBudget, PrivacyPolicy};
use dpsql::engine::{Engine, EngineOptions};
use dpsql::eval::{ground_truth, Dataset};
use dpsql::validator::check_sql;
use dpsql::Value;

pub type Answer = BTreeMap<Vec<Value>, f64>;

fn col(t: &TableData, name: &str) -> usize {
    t.column_index(name).expect("column exists")
}

fn f(v: &Value) -> f64 {
    v.as_f64().expect("numeric")
}

fn population_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn scalar(x: f64) -> Answer {
    BTreeMap::from([(Vec::new(), x)])
}

/// Exact answers of the ten workload queries, computed from the raw rows
/// with two-pass formulas and no SQL.
pub fn brute_force(ds: &Dataset) -> BTreeMap<&'static str, Answer> {
    let customer = ds.table("customer").unwrap();
    let orders = ds.table("orders").unwrap();
    let lineitem = ds.table("lineitem").unwrap();

    let bal: Vec<f64> = customer.rows.iter().map(|r| f(&r[col(customer, "c_acctbal")])).collect();
    let nations: BTreeSet<&Value> = customer.rows.iter().map(|r| &r[col(customer, "c_nationkey")]).collect();
    let segment: HashMap<&Value, &Value> = customer
        .rows
        .iter()
        .map(|r| (&r[col(customer, "c_custkey")], &r[col(customer, "c_mktsegment")]))
        .collect();
    let order_keys: BTreeSet<&Value> = orders.rows.iter().map(|r| &r[col(orders, "o_orderkey")]).collect();

    let pairs: Vec<(f64, f64)> = lineitem
        .rows
        .iter()
        .filter(|r| order_keys.contains(&r[col(lineitem, "l_orderkey")]))
        .map(|r| (f(&r[col(lineitem, "l_extendedprice")]), f(&r[col(lineitem, "l_discount")])))
        .collect();
    let mx = mean(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let my = mean(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let covar = pairs.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / pairs.len() as f64;

    let price = |r: &Vec<Value>| f(&r[col(orders, "o_totalprice")]);
    let ck = col(orders, "o_custkey");
    fn pick(r: &[Value], i: usize) -> &Value {
        &r[i]
    }
    let building: Vec<f64> = orders
        .rows
        .iter()
        .filter(|r| segment.get(pick(r, ck)).is_some_and(|s| **s == Value::Text("BUILDING".into())))
        .map(price)
        .collect();
    let mut by_status: BTreeMap<Vec<Value>, Vec<f64>> = BTreeMap::new();
    let mut by_segment: BTreeMap<Vec<Value>, Vec<f64>> = BTreeMap::new();
    for r in &orders.rows {
        by_status.entry(vec![r[col(orders, "o_orderstatus")].clone()]).or_default().push(price(r));
        if let Some(s) = segment.get(pick(r, ck)) {
            by_segment.entry(vec![(*s).clone()]).or_default().push(price(r));
        }
    }
    let avg_map = |m: BTreeMap<Vec<Value>, Vec<f64>>| m.into_iter().map(|(k, v)| (k, mean(&v))).collect();

    BTreeMap::from([
        ("COUNT", scalar(customer.rows.len() as f64)),
        ("COUNT_DISTINCT", scalar(nations.len() as f64)),
        ("SUM", scalar(bal.iter().sum())),
        ("AVG", scalar(mean(&bal))),
        ("VAR", scalar(population_var(&bal))),
        ("STDDEV", scalar(population_var(&bal).sqrt())),
        ("COVAR", scalar(covar)),
        ("JOIN", scalar(mean(&building))),
        ("GROUPBY", avg_map(by_status)),
        ("GROUPBY_JOIN", avg_map(by_segment)),
    ])
}

pub fn relative_error(estimate: f64, truth: f64) -> f64 {
    (estimate - truth).abs() / truth.abs().max(1e-300)
}

/// Policy whose caps never bind on `sql` over the loaded data.
pub fn slack_policy(sql: &str, catalog: &Catalog, adapter: &mut dyn BackendAdapter) -> PrivacyPolicy {
    let summary = check_sql(sql, catalog).expect("valid");
    let caps = ground_truth(&summary, catalog, adapter).expect("truth").caps();
    PrivacyPolicy {
        max_rows_per_user_per_partition: caps.rows_per_partition,
        max_partitions_per_user: caps.partitions,
        max_distinct_values_per_user: caps.distinct_values,
        ..PrivacyPolicy::default()
    }
}

/// Engine that adds (almost) no noise and applies only the exact k rule.
pub fn noiseless_engine(catalog: Catalog, policy: PrivacyPolicy, adapter: Box<dyn BackendAdapter>) -> Engine {
    Engine::new(catalog, policy, GlobalBudget::new(1e200, 0.5, AccountantKind::Rdp), adapter).with_options(
        EngineOptions {
            fixed_sigma: Some(1e-9),
            exact_threshold: true,
        },
    )
}

pub fn adapter_named(name: &str) -> Box<dyn BackendAdapter> {
    match name {
        "memory" => Box::new(MemoryAdapter::new()),
        "memory-no-windows" => Box::new(MemoryAdapter::without_row_numbering()),
        "sqlite" => Box::new(SqliteAdapter::in_memory().unwrap()),
        other => panic!("unknown adapter {other}"),
    }
}

/// Counts every statement sent to the wrapped adapter.
pub struct CountingAdapter<A> {
    pub inner: A,
    pub calls: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl<A: BackendAdapter> BackendAdapter for CountingAdapter<A> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.execute(sql)
    }

    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError> {
        self.inner.load_table(data)
    }
}
