//! Utility benchmark: synthetic TPC-H-style data, a fixed ten-query
//! workload and mean relative error (MRE) over repeated noisy runs.

mod mre;
pub mod tpch;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::backend::{build_row_level_sql, BackendAdapter, BackendError};
use crate::catalog::{AccountantKind, Catalog, GlobalBudget, PrivacyPolicy, WeightStrategy};
use crate::engine::{Engine, EngineError, EngineOptions, QueryRequest};
use crate::mechanisms::{plug_in, AggregateKind, ContributionCaps, MomentSet};
use crate::validator::{check_sql, OutputColumn, QueryPlanSummary};
use crate::Value;

pub use mre::{median, mre, relative_errors, MreOutcome};
pub use tpch::{generate_dataset, pearson, tpch_catalog, Dataset, SyntheticDatasetSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("workload: {0}")]
    Workload(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("query {query}: {error}")]
    Engine { query: String, error: EngineError },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkloadQuery {
    pub name: String,
    pub sql: String,
}

pub const TPCH_WORKLOAD: &str = include_str!("../../workload/tpch.sql");

/// Splits a workload file into queries. Each query starts after a
/// `-- name: NAME` line; other comment lines and a trailing `;` are dropped.
pub fn parse_workload(text: &str) -> Result<Vec<WorkloadQuery>, EvalError> {
    let mut out: Vec<WorkloadQuery> = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix("-- name:") {
            out.push(WorkloadQuery {
                name: name.trim().to_string(),
                sql: String::new(),
            });
        } else if trimmed.starts_with("--") || trimmed.is_empty() {
            continue;
        } else if let Some(q) = out.last_mut() {
            if !q.sql.is_empty() {
                q.sql.push('\n');
            }
            q.sql.push_str(line.trim_end());
        } else {
            return Err(EvalError::Workload(format!("SQL before the first name header: {trimmed}")));
        }
    }
    for q in &mut out {
        q.sql = q.sql.trim().trim_end_matches(';').trim_end().to_string();
        if q.sql.is_empty() {
            return Err(EvalError::Workload(format!("query {} is empty", q.name)));
        }
    }
    Ok(out)
}

pub fn tpch_workload() -> Vec<WorkloadQuery> {
    parse_workload(TPCH_WORKLOAD).expect("bundled workload parses")
}

/// Exact clamped statistics of one query, plus the contribution extremes
/// seen in the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryTruth {
    /// Per group key, one value per aggregate.
    pub components: BTreeMap<Vec<Value>, Vec<f64>>,
    /// Largest per-user contribution in the data: rows per (user, key),
    /// keys per user, distinct values per (user, key).
    pub max_rows_per_partition: u32,
    pub max_partitions: u32,
    pub max_distinct_values: u32,
}

impl QueryTruth {
    pub fn caps(&self) -> ContributionCaps {
        ContributionCaps {
            rows_per_partition: self.max_rows_per_partition.max(1),
            partitions: self.max_partitions.max(1),
            distinct_values: self.max_distinct_values.max(1),
        }
    }
}

fn key_of(row: &[Value], cols: &[usize]) -> Vec<Value> {
    cols.iter().map(|&c| row[c].clone()).collect()
}

/// Non-private reference answer: every row counts, arguments are clamped to
/// their declared ranges.
pub fn ground_truth(
    summary: &QueryPlanSummary,
    catalog: &Catalog,
    adapter: &mut dyn BackendAdapter,
) -> Result<QueryTruth, EvalError> {
    let sql = build_row_level_sql(summary, catalog);
    let rs = adapter.execute(&sql.moments)?;
    let nkeys = summary.group_keys.len();
    let idx = |name: &str| {
        rs.column_index(name)
            .ok_or_else(|| EvalError::Backend(BackendError::Shape(format!("missing column {name}"))))
    };
    let uid = idx("uid")?;
    let kcols: Vec<usize> = (0..nkeys).map(|i| idx(&format!("k{i}"))).collect::<Result<_, _>>()?;

    let mut moments: BTreeMap<Vec<Value>, Vec<MomentSet>> = BTreeMap::new();
    let mut rows_per: HashMap<(Value, Vec<Value>), u32> = HashMap::new();
    for r in &rs.rows {
        let key = key_of(r, &kcols);
        *rows_per.entry((r[uid].clone(), key.clone())).or_default() += 1;
        let entry = moments
            .entry(key)
            .or_insert_with(|| vec![MomentSet::default(); summary.aggregates.len()]);
        for (j, a) in summary.aggregates.iter().enumerate() {
            let get = |m: usize| rs.column_index(&format!("a{j}_{m}")).map(|c| &r[c]);
            let m = &mut entry[j];
            match a.kind {
                AggregateKind::CountDistinct => {}
                AggregateKind::Count => {
                    if get(0).is_none_or(|v| !v.is_null()) {
                        m.n += 1;
                    }
                }
                AggregateKind::Covar => {
                    if let (Some(x), Some(y)) = (get(0).and_then(Value::as_f64), get(1).and_then(Value::as_f64)) {
                        m.add(&MomentSet::of_pairs(&[(x, y)]));
                    }
                }
                _ => {
                    if let Some(x) = get(0).and_then(Value::as_f64) {
                        m.add(&MomentSet::of(&[x]));
                    }
                }
            }
        }
    }

    let mut max_distinct = 0u32;
    for (j, stmt) in &sql.distinct {
        let rs = adapter.execute(stmt)?;
        let uid = rs.column_index("uid").unwrap_or(0);
        let kcols: Vec<usize> = (0..nkeys).filter_map(|i| rs.column_index(&format!("k{i}"))).collect();
        let v = rs.column_index("v").unwrap_or(rs.columns.len() - 1);
        let mut union: BTreeMap<Vec<Value>, BTreeSet<Value>> = BTreeMap::new();
        let mut per_user: HashMap<(Value, Vec<Value>), u32> = HashMap::new();
        for r in &rs.rows {
            let key = key_of(r, &kcols);
            union.entry(key.clone()).or_default().insert(r[v].clone());
            let c = per_user.entry((r[uid].clone(), key)).or_default();
            *c += 1;
            max_distinct = max_distinct.max(*c);
        }
        for (key, values) in union {
            if let Some(m) = moments.get_mut(&key) {
                m[*j].n = values.len() as u64;
            }
        }
    }

    let mut keys_per_user: HashMap<&Value, u32> = HashMap::new();
    for (user, _) in rows_per.keys() {
        *keys_per_user.entry(user).or_default() += 1;
    }
    let mut components = BTreeMap::new();
    for (key, ms) in moments {
        let values = summary
            .aggregates
            .iter()
            .zip(&ms)
            .map(|(a, m)| plug_in(a.kind, m).unwrap_or(f64::NAN))
            .collect();
        components.insert(key, values);
    }
    Ok(QueryTruth {
        components,
        max_rows_per_partition: rows_per.values().copied().max().unwrap_or(0),
        max_partitions: keys_per_user.values().copied().max().unwrap_or(0),
        max_distinct_values: max_distinct,
    })
}

/// Maps a released row set back to `key -> aggregate values`.
pub fn released_components(summary: &QueryPlanSummary, rows: &[Vec<Value>]) -> BTreeMap<Vec<Value>, Vec<f64>> {
    let mut key_pos = vec![0; summary.group_keys.len()];
    let mut agg_pos = vec![0; summary.aggregates.len()];
    for (pos, o) in summary.outputs.iter().enumerate() {
        match o {
            OutputColumn::Key(i) => key_pos[*i] = pos,
            OutputColumn::Aggregate(j) => agg_pos[*j] = pos,
        }
    }
    rows.iter()
        .map(|r| {
            (
                key_pos.iter().map(|&p| r[p].clone()).collect(),
                agg_pos.iter().map(|&p| r[p].as_f64().unwrap_or(f64::NAN)).collect(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkConfig {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub trials: usize,
    pub seed: u64,
    pub weights: WeightStrategy,
    /// Minimum frequency; the benchmark default of 1 imposes no constraint.
    pub k: u32,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            epsilons: vec![0.1, 1.0, 10.0],
            delta: 1e-7,
            trials: 25,
            seed: 0,
            weights: WeightStrategy::Optimized,
            k: 1,
        }
    }
}

/// One (query, ε) cell of the report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MreRow {
    pub query: String,
    pub epsilon: f64,
    pub delta: f64,
    pub trials: usize,
    /// Exact value per component, in key order.
    pub truth: Vec<f64>,
    /// `estimates[i][j]`: trial `i`, component `j`; `None` when suppressed.
    pub estimates: Vec<Vec<Option<f64>>>,
    pub outcome: MreOutcome,
    /// σ of each noisy quantity, in mechanism-report order.
    pub sigmas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MreReport {
    pub rows: Vec<MreRow>,
}

impl MreReport {
    pub fn row(&self, query: &str, epsilon: f64) -> Option<&MreRow> {
        self.rows.iter().find(|r| r.query == query && r.epsilon == epsilon)
    }

    /// Columns: query, epsilon, delta, N, MRE, suppressed_fraction. An
    /// unscorable MRE is written as an empty field.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Csv(e.to_string());
        w.write_record(["query", "epsilon", "delta", "N", "MRE", "suppressed_fraction"])
            .map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.query.clone(),
                r.epsilon.to_string(),
                r.delta.to_string(),
                r.trials.to_string(),
                r.outcome.mre.map(|m| m.to_string()).unwrap_or_default(),
                r.outcome.suppressed_fraction.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn trial_seed(base: u64, query: usize, eps: usize, trial: usize) -> u64 {
    base ^ (query as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (eps as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (trial as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
}

/// Runs every query `trials` times at each ε. Clamp ranges come from
/// `catalog` (use [`Dataset::fitted_catalog`] for data extremes) and the
/// contribution caps from the largest per-user contribution in the data, so
/// neither clamping nor capping biases the answers. The adapter must already
/// hold the data; wrap it in a `CachingAdapter` to run each statement once.
pub fn run_benchmark(
    adapter: Box<dyn BackendAdapter>,
    catalog: &Catalog,
    workload: &[WorkloadQuery],
    config: &BenchmarkConfig,
) -> Result<(MreReport, Box<dyn BackendAdapter>), EvalError> {
    let mut adapter = adapter;
    let mut report = MreReport::default();
    for (qi, q) in workload.iter().enumerate() {
        let fail = |error| EvalError::Engine {
            query: q.name.clone(),
            error,
        };
        let summary = check_sql(&q.sql, catalog).map_err(|r| fail(r.into()))?;
        let truth = ground_truth(&summary, catalog, adapter.as_mut())?;
        let caps = truth.caps();
        let policy = PrivacyPolicy {
            k_min: config.k,
            max_partitions_per_user: caps.partitions,
            max_rows_per_user_per_partition: caps.rows_per_partition,
            max_distinct_values_per_user: caps.distinct_values,
            estimator_weights: config.weights,
            ..PrivacyPolicy::default()
        };
        // Accounting is not under test here; the ledger only has to admit.
        let budget = GlobalBudget::new(1e12, 0.5, AccountantKind::Rdp);
        let mut engine = Engine::new(catalog.clone(), policy, budget, adapter).with_options(EngineOptions::default());
        let keys: Vec<&Vec<Value>> = truth.components.keys().collect();
        for (ei, &epsilon) in config.epsilons.iter().enumerate() {
            let mut estimates = Vec::with_capacity(config.trials);
            let mut sigmas = Vec::new();
            for trial in 0..config.trials {
                let request = QueryRequest::new(q.sql.clone(), epsilon, config.delta)
                    .with_seed(trial_seed(config.seed, qi, ei, trial));
                let result = engine.run_query(&request).map_err(fail)?;
                if sigmas.is_empty() {
                    let r = &result.mechanism_report;
                    sigmas.extend(r.threshold.iter().map(|t| t.count.sigma));
                    sigmas.extend(r.aggregates.iter().flat_map(|a| a.noise.iter().map(|n| n.sigma)));
                }
                let released = released_components(&summary, &result.rows);
                let mut row = Vec::new();
                for key in &keys {
                    for j in 0..summary.aggregates.len() {
                        row.push(released.get(*key).map(|v| v[j]));
                    }
                }
                estimates.push(row);
            }
            let truth_flat: Vec<f64> = truth.components.values().flatten().copied().collect();
            let outcome = mre(&truth_flat, &estimates);
            report.rows.push(MreRow {
                query: q.name.clone(),
                epsilon,
                delta: config.delta,
                trials: config.trials,
                truth: truth_flat,
                estimates,
                outcome,
                sigmas,
            });
        }
        adapter = engine.into_adapter();
    }
    Ok((report, adapter))
}
