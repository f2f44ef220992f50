//! Per-user pre-aggregation.
//!
//! The moments statement has three levels:
//!
//! ```text
//! SELECT uid, k0.., COUNT(*) AS nrows, <moments>          -- per (user, key)
//! FROM (SELECT .., ROW_NUMBER() OVER (PARTITION BY uid, k0..
//!                                     ORDER BY <all columns>) AS rn
//!       FROM (SELECT <owner> AS uid, <key> AS k0, <clamped arg> AS a0_0 ..
//!             FROM <joins> WHERE <filter>) AS clamped) AS ranked
//! WHERE rn <= C_row
//! GROUP BY uid, k0..
//! ```
//!
//! `COUNT(DISTINCT x)` gets its own statement over `SELECT DISTINCT uid,
//! keys, x`, capped at `C_dist` values per (user, key). Without window
//! support the same row-level projections are fetched sorted and capped in
//! process; both paths keep the same rows.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::Serialize;

use crate::catalog::{Catalog, PrivacyPolicy};
use crate::mechanisms::{AggregateKind, ClampBounds, MomentSet};
use crate::sql::{quote_ident, BinaryOp, Expr, ExprKind, Literal};
use crate::validator::QueryPlanSummary;
use crate::Value;

use super::{BackendAdapter, BackendError, RowSet};

/// What one user contributed to one aggregate within one partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Contribution {
    Moments(MomentSet),
    /// Distinct argument values, at most `C_dist` of them.
    Distinct(Vec<Value>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserPartitionMoments {
    pub user: Value,
    pub key: Vec<Value>,
    /// Rows kept after the `C_row` cap.
    pub rows: u64,
    /// One entry per aggregate of the plan.
    pub contributions: Vec<Contribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreAggSql {
    pub moments: String,
    /// `(aggregate index, statement)` for each `COUNT(DISTINCT ·)`.
    pub distinct: Vec<(usize, String)>,
}

impl PreAggSql {
    pub fn statements(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.moments.as_str()).chain(self.distinct.iter().map(|(_, s)| s.as_str()))
    }
}

fn real(x: f64) -> Expr {
    Expr::literal(Literal::Real(x))
}

fn case_clamp(e: Expr, b: ClampBounds) -> Expr {
    let test = |op, x: &Expr| Expr::binary(op, x.clone(), real(if op == BinaryOp::Lt { b.lo } else { b.hi }));
    Expr::synthetic(ExprKind::Case {
        operand: None,
        branches: vec![
            (
                Expr::synthetic(ExprKind::IsNull {
                    expr: Box::new(e.clone()),
                    negated: false,
                }),
                Expr::literal(Literal::Null),
            ),
            (test(BinaryOp::Lt, &e), real(b.lo)),
            (test(BinaryOp::Gt, &e), real(b.hi)),
        ],
        else_result: Some(Box::new(e)),
    })
}

fn null_unless(guard: &Expr, e: Expr) -> Expr {
    Expr::synthetic(ExprKind::Case {
        operand: None,
        branches: vec![(
            Expr::synthetic(ExprKind::IsNull {
                expr: Box::new(guard.clone()),
                negated: false,
            }),
            Expr::literal(Literal::Null),
        )],
        else_result: Some(Box::new(e)),
    })
}

struct Shape {
    from: String,
    filter: String,
    owner: String,
    keys: Vec<String>,
    /// Row-level argument columns, per aggregate.
    args: Vec<Vec<String>>,
}

fn shape(summary: &QueryPlanSummary, catalog: &Catalog) -> Shape {
    let table_of = |alias: &str| {
        summary
            .sources
            .iter()
            .find(|s| s.alias == alias)
            .map(|s| s.table.as_str())
            .unwrap_or_default()
    };
    // Clamp every column first, then the whole argument to its interval.
    let clamp_arg = |e: &Expr, b: ClampBounds| -> Expr {
        if let ExprKind::Column { .. } = e.kind {
            return case_clamp(e.clone(), b);
        }
        let inner = crate::validator::map_columns(e, &mut |q, n, _| {
            let col = Expr::column(q, n);
            let bounds = q
                .and_then(|q| catalog.table(table_of(q)))
                .and_then(|t| t.column(n))
                .and_then(|c| c.clamp);
            match bounds {
                Some(cb) => case_clamp(col, cb),
                None => col,
            }
        });
        case_clamp(inner, b)
    };

    let mut from = String::new();
    let mut placed: BTreeSet<&str> = BTreeSet::new();
    let mut pending: Vec<_> = summary.sources.iter().collect();
    let mut used = vec![false; summary.join_edges.len()];
    let first = pending.remove(0);
    let _ = write!(from, "{} AS {}", quote_ident(&first.table), quote_ident(&first.alias));
    placed.insert(&first.alias);
    while !pending.is_empty() {
        let pos = pending
            .iter()
            .position(|s| {
                summary.join_edges.iter().any(|e| {
                    (e.left.source == s.alias && placed.contains(e.right.source.as_str()))
                        || (e.right.source == s.alias && placed.contains(e.left.source.as_str()))
                })
            })
            .unwrap_or(0);
        let s = pending.remove(pos);
        placed.insert(&s.alias);
        let mut on = Vec::new();
        for (i, e) in summary.join_edges.iter().enumerate() {
            if !used[i] && placed.contains(e.left.source.as_str()) && placed.contains(e.right.source.as_str()) {
                used[i] = true;
                on.push(format!(
                    "{} = {}",
                    Expr::column(Some(&e.left.source), &e.left.column),
                    Expr::column(Some(&e.right.source), &e.right.column)
                ));
            }
        }
        if on.is_empty() {
            on.push("1 = 1".into());
        }
        let _ = write!(
            from,
            " JOIN {} AS {} ON {}",
            quote_ident(&s.table),
            quote_ident(&s.alias),
            on.join(" AND ")
        );
    }

    let owner = Expr::column(Some(&summary.owner.source), &summary.owner.column).to_string();
    let mut filter = format!("{owner} IS NOT NULL");
    if let Some(f) = &summary.row_filter {
        filter = format!("({f}) AND {filter}");
    }
    let keys = summary
        .group_keys
        .iter()
        .map(|k| Expr::column(Some(&k.column.source), &k.column.column).to_string())
        .collect();
    let args = summary
        .aggregates
        .iter()
        .map(|a| match a.kind {
            AggregateKind::Count | AggregateKind::CountDistinct => a.args.iter().map(|e| e.to_string()).collect(),
            AggregateKind::Covar => {
                let x = clamp_arg(&a.args[0], a.bounds[0]);
                let y = clamp_arg(&a.args[1], a.bounds[1]);
                vec![
                    null_unless(&a.args[1], x).to_string(),
                    null_unless(&a.args[0], y).to_string(),
                ]
            }
            _ => vec![clamp_arg(&a.args[0], a.bounds[0]).to_string()],
        })
        .collect();
    Shape {
        from,
        filter,
        owner,
        keys,
        args,
    }
}

fn key_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("k{i}")).collect()
}

/// Row-level projection shared by both execution paths.
fn row_level_select(s: &Shape, summary: &QueryPlanSummary) -> (String, Vec<String>) {
    let mut items = vec![format!("{} AS uid", s.owner)];
    let mut names = vec!["uid".to_string()];
    for (i, k) in s.keys.iter().enumerate() {
        items.push(format!("{k} AS k{i}"));
        names.push(format!("k{i}"));
    }
    for (j, a) in summary.aggregates.iter().enumerate() {
        if a.kind == AggregateKind::CountDistinct {
            continue;
        }
        for (m, e) in s.args[j].iter().enumerate() {
            items.push(format!("{e} AS a{j}_{m}"));
            names.push(format!("a{j}_{m}"));
        }
    }
    (
        format!("SELECT {} FROM {} WHERE {}", items.join(", "), s.from, s.filter),
        names,
    )
}

fn distinct_select(s: &Shape, j: usize) -> String {
    let mut items = vec![format!("{} AS uid", s.owner)];
    for (i, k) in s.keys.iter().enumerate() {
        items.push(format!("{k} AS k{i}"));
    }
    let x = &s.args[j][0];
    items.push(format!("{x} AS v"));
    format!(
        "SELECT DISTINCT {} FROM {} WHERE {} AND {x} IS NOT NULL",
        items.join(", "),
        s.from,
        s.filter
    )
}

fn moment_columns(summary: &QueryPlanSummary) -> Vec<String> {
    let mut cols = Vec::new();
    for (j, a) in summary.aggregates.iter().enumerate() {
        let x = format!("a{j}_0");
        match a.kind {
            AggregateKind::CountDistinct => {}
            AggregateKind::Count if a.args.is_empty() => cols.push(format!("COUNT(*) AS n{j}")),
            AggregateKind::Count => cols.push(format!("COUNT({x}) AS n{j}")),
            kind => {
                cols.push(format!("COUNT({x}) AS n{j}"));
                cols.push(format!("SUM({x}) AS s1_{j}"));
                if kind.is_quadratic() {
                    cols.push(format!("SUM({x} * {x}) AS s2_{j}"));
                }
                if kind == AggregateKind::Covar {
                    let y = format!("a{j}_1");
                    cols.push(format!("SUM({y}) AS sy_{j}"));
                    cols.push(format!("SUM({x} * {y}) AS sxy_{j}"));
                }
            }
        }
    }
    cols
}

/// Pre-aggregation statements for engines with window functions.
/// Identical inputs give identical text.
pub fn build_preagg_sql(summary: &QueryPlanSummary, catalog: &Catalog, policy: &PrivacyPolicy) -> PreAggSql {
    let s = shape(summary, catalog);
    let (inner, names) = row_level_select(&s, summary);
    let keys = key_names(s.keys.len());
    let partition = std::iter::once("uid".to_string()).chain(keys.iter().cloned()).collect::<Vec<_>>().join(", ");
    let mut outer = vec!["uid".to_string()];
    outer.extend(keys.iter().cloned());
    outer.push("COUNT(*) AS nrows".into());
    outer.extend(moment_columns(summary));
    let moments = format!(
        "SELECT {} FROM (SELECT {}, ROW_NUMBER() OVER (PARTITION BY {partition} ORDER BY {}) AS rn FROM ({inner}) AS clamped) AS ranked WHERE rn <= {} GROUP BY {partition} ORDER BY {partition}",
        outer.join(", "),
        names.join(", "),
        names.join(", "),
        policy.max_rows_per_user_per_partition,
    );
    let distinct = summary
        .aggregates
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind == AggregateKind::CountDistinct)
        .map(|(j, _)| {
            let cols = std::iter::once("uid".to_string())
                .chain(keys.iter().cloned())
                .chain(std::iter::once("v".to_string()))
                .collect::<Vec<_>>()
                .join(", ");
            (
                j,
                format!(
                    "SELECT {cols} FROM (SELECT {cols}, ROW_NUMBER() OVER (PARTITION BY {partition} ORDER BY v) AS rn FROM ({}) AS d) AS ranked WHERE rn <= {} ORDER BY {cols}",
                    distinct_select(&s, j),
                    policy.max_distinct_values_per_user,
                ),
            )
        })
        .collect();
    PreAggSql { moments, distinct }
}

/// Row-level statements for engines without window functions; rows come
/// back sorted so the first `C_row` of each (user, key) match the windowed
/// path.
pub fn build_row_level_sql(summary: &QueryPlanSummary, catalog: &Catalog) -> PreAggSql {
    let s = shape(summary, catalog);
    let (inner, names) = row_level_select(&s, summary);
    let keys = key_names(s.keys.len());
    let moments = format!("{inner} ORDER BY {}", names.join(", "));
    let distinct = summary
        .aggregates
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind == AggregateKind::CountDistinct)
        .map(|(j, _)| {
            let cols = std::iter::once("uid".to_string())
                .chain(keys.iter().cloned())
                .chain(std::iter::once("v".to_string()))
                .collect::<Vec<_>>()
                .join(", ");
            (j, format!("{} ORDER BY {cols}", distinct_select(&s, j)))
        })
        .collect();
    PreAggSql { moments, distinct }
}

fn col(rs: &RowSet, name: &str) -> Result<usize, BackendError> {
    rs.column_index(name)
        .ok_or_else(|| BackendError::Shape(format!("missing column '{name}'")))
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap_or(0.0)
}

fn count(v: &Value) -> u64 {
    v.as_i64().unwrap_or(0).max(0) as u64
}

type UserKey = (Value, Vec<Value>);

/// Attaches capped distinct values to the matching (user, key) entries.
fn attach_distinct(
    out: &mut [UserPartitionMoments],
    j: usize,
    rs: &RowSet,
    nkeys: usize,
    cap: Option<u32>,
) -> Result<(), BackendError> {
    let uid = col(rs, "uid")?;
    let kcols: Vec<usize> = (0..nkeys).map(|i| col(rs, &format!("k{i}"))).collect::<Result<_, _>>()?;
    let v = col(rs, "v")?;
    let mut index: std::collections::HashMap<UserKey, usize> = std::collections::HashMap::new();
    for (i, u) in out.iter().enumerate() {
        index.insert((u.user.clone(), u.key.clone()), i);
    }
    for r in &rs.rows {
        let k = (r[uid].clone(), kcols.iter().map(|&c| r[c].clone()).collect());
        let Some(&i) = index.get(&k) else { continue };
        if let Contribution::Distinct(values) = &mut out[i].contributions[j] {
            if cap.is_none_or(|c| values.len() < c as usize) && values.last() != Some(&r[v]) {
                values.push(r[v].clone());
            }
        }
    }
    Ok(())
}

fn empty_contributions(summary: &QueryPlanSummary) -> Vec<Contribution> {
    summary
        .aggregates
        .iter()
        .map(|a| match a.kind {
            AggregateKind::CountDistinct => Contribution::Distinct(Vec::new()),
            _ => Contribution::Moments(MomentSet::default()),
        })
        .collect()
}

/// Runs the pre-aggregation against `adapter`, choosing the windowed or the
/// in-process path from its capabilities. Output is sorted by (user, key).
pub fn fetch_user_partition_moments(
    adapter: &mut dyn BackendAdapter,
    summary: &QueryPlanSummary,
    catalog: &Catalog,
    policy: &PrivacyPolicy,
) -> Result<Vec<UserPartitionMoments>, BackendError> {
    let nkeys = summary.group_keys.len();
    if adapter.capabilities().row_numbering {
        let sql = build_preagg_sql(summary, catalog, policy);
        let rs = adapter.execute(&sql.moments)?;
        let uid = col(&rs, "uid")?;
        let kcols: Vec<usize> = (0..nkeys).map(|i| col(&rs, &format!("k{i}"))).collect::<Result<_, _>>()?;
        let nrows = col(&rs, "nrows")?;
        let mut out = Vec::with_capacity(rs.rows.len());
        for r in &rs.rows {
            let mut contributions = empty_contributions(summary);
            for (j, a) in summary.aggregates.iter().enumerate() {
                if a.kind == AggregateKind::CountDistinct {
                    continue;
                }
                let get = |name: String| rs.column_index(&name).map(|c| &r[c]);
                let m = MomentSet {
                    n: get(format!("n{j}")).map(count).unwrap_or(0),
                    s1: get(format!("s1_{j}")).map(num).unwrap_or(0.0),
                    s2: get(format!("s2_{j}")).map(num).unwrap_or(0.0),
                    sy: get(format!("sy_{j}")).map(num),
                    sxy: get(format!("sxy_{j}")).map(num),
                };
                contributions[j] = Contribution::Moments(m);
            }
            out.push(UserPartitionMoments {
                user: r[uid].clone(),
                key: kcols.iter().map(|&c| r[c].clone()).collect(),
                rows: count(&r[nrows]),
                contributions,
            });
        }
        for (j, stmt) in &sql.distinct {
            let rs = adapter.execute(stmt)?;
            attach_distinct(&mut out, *j, &rs, nkeys, None)?;
        }
        sort(&mut out);
        Ok(out)
    } else {
        let sql = build_row_level_sql(summary, catalog);
        let rs = adapter.execute(&sql.moments)?;
        let mut out = cap_in_process(&rs, summary, policy.max_rows_per_user_per_partition)?;
        for (j, stmt) in &sql.distinct {
            let rs = adapter.execute(stmt)?;
            let mut sorted = rs.clone();
            sorted.rows.sort();
            attach_distinct(&mut out, *j, &sorted, nkeys, Some(policy.max_distinct_values_per_user))?;
        }
        sort(&mut out);
        Ok(out)
    }
}

fn sort(out: &mut [UserPartitionMoments]) {
    out.sort_by(|a, b| (&a.user, &a.key).cmp(&(&b.user, &b.key)));
}

fn cap_in_process(rs: &RowSet, summary: &QueryPlanSummary, c_row: u32) -> Result<Vec<UserPartitionMoments>, BackendError> {
    let nkeys = summary.group_keys.len();
    let uid = col(rs, "uid")?;
    let kcols: Vec<usize> = (0..nkeys).map(|i| col(rs, &format!("k{i}"))).collect::<Result<_, _>>()?;
    let mut arg_cols: Vec<Vec<usize>> = Vec::new();
    for (j, a) in summary.aggregates.iter().enumerate() {
        let n = match a.kind {
            AggregateKind::CountDistinct => 0,
            AggregateKind::Count => a.args.len(),
            AggregateKind::Covar => 2,
            _ => 1,
        };
        arg_cols.push((0..n).map(|m| col(rs, &format!("a{j}_{m}"))).collect::<Result<_, _>>()?);
    }
    let mut rows: Vec<&Vec<Value>> = rs.rows.iter().collect();
    rows.sort();
    let mut out: Vec<UserPartitionMoments> = Vec::new();
    let mut kept = 0u32;
    for r in rows {
        let user = &r[uid];
        let key: Vec<Value> = kcols.iter().map(|&c| r[c].clone()).collect();
        let same = out.last().is_some_and(|u| u.user == *user && u.key == key);
        if !same {
            out.push(UserPartitionMoments {
                user: user.clone(),
                key,
                rows: 0,
                contributions: empty_contributions(summary),
            });
            kept = 0;
        }
        if kept >= c_row {
            continue;
        }
        kept += 1;
        let u = out.last_mut().expect("pushed above");
        u.rows += 1;
        for (j, a) in summary.aggregates.iter().enumerate() {
            let Contribution::Moments(m) = &mut u.contributions[j] else { continue };
            let vals: Vec<&Value> = arg_cols[j].iter().map(|&c| &r[c]).collect();
            match a.kind {
                AggregateKind::Count => {
                    if vals.iter().all(|v| !v.is_null()) {
                        m.n += 1;
                    }
                }
                AggregateKind::Covar => {
                    if vals.iter().all(|v| !v.is_null()) {
                        let (x, y) = (num(vals[0]), num(vals[1]));
                        m.n += 1;
                        m.s1 += x;
                        m.s2 += x * x;
                        *m.sy.get_or_insert(0.0) += y;
                        *m.sxy.get_or_insert(0.0) += x * y;
                    }
                }
                _ => {
                    if !vals[0].is_null() {
                        let x = num(vals[0]);
                        m.n += 1;
                        m.s1 += x;
                        m.s2 += x * x;
                    }
                }
            }
        }
    }
    // Covariance moments exist even when every pair was NULL.
    for u in &mut out {
        for (j, a) in summary.aggregates.iter().enumerate() {
            if let (AggregateKind::Covar, Contribution::Moments(m)) = (a.kind, &mut u.contributions[j]) {
                m.sy.get_or_insert(0.0);
                m.sxy.get_or_insert(0.0);
            }
        }
    }
    // Quadratic moments are only produced for the kinds that use them,
    // matching the windowed statement.
    for u in &mut out {
        for (j, a) in summary.aggregates.iter().enumerate() {
            if let Contribution::Moments(m) = &mut u.contributions[j] {
                if !a.kind.is_quadratic() {
                    m.s2 = 0.0;
                }
                if a.kind == AggregateKind::Count {
                    m.s1 = 0.0;
                }
            }
        }
    }
    Ok(out)
}
