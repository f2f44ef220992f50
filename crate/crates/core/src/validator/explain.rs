use std::fmt::Write;

use crate::catalog::PrivacyPolicy;

use super::QueryPlanSummary;

/// Deterministic, human-readable rendering of a plan together with the caps
/// that bound its sensitivity.
pub fn explain(summary: &QueryPlanSummary, policy: &PrivacyPolicy) -> String {
    let mut out = String::new();
    for a in &summary.aggregates {
        let args: Vec<String> = a.args.iter().map(|e| e.to_string()).collect();
        let args = if args.is_empty() { "*".to_string() } else { args.join(", ") };
        let _ = write!(out, "aggregate: {}({}) AS {}", a.kind.name(), args, a.alias);
        if !a.bounds.is_empty() {
            let b: Vec<String> = a.bounds.iter().map(|b| format!("[{}, {}]", b.lo, b.hi)).collect();
            let _ = write!(out, " clamp {}", b.join(" x "));
        }
        out.push('\n');
    }
    for k in &summary.group_keys {
        let _ = writeln!(out, "group key: {} AS {}", k.column, k.name);
    }
    let sources: Vec<String> = summary
        .sources
        .iter()
        .map(|s| {
            if s.alias == s.table {
                s.table.clone()
            } else {
                format!("{} AS {}", s.table, s.alias)
            }
        })
        .collect();
    let _ = writeln!(out, "sources: {}", sources.join(", "));
    for e in &summary.join_edges {
        let _ = writeln!(out, "join: {e}");
    }
    if let Some(f) = &summary.row_filter {
        let _ = writeln!(out, "filter: {f}");
    }
    let identity = summary.unit_lineage.owners.values().all(|p| p.via.is_empty());
    if identity {
        let _ = writeln!(out, "lineage: identity ({})", summary.owner);
    } else {
        let _ = writeln!(out, "lineage: user = {}", summary.owner);
        for (source, path) in &summary.unit_lineage.owners {
            if path.via.is_empty() {
                let _ = writeln!(out, "  {source}: identity");
            } else {
                let via: Vec<String> = path.via.iter().map(|e| e.to_string()).collect();
                let _ = writeln!(out, "  {source}: via {}", via.join(", "));
            }
        }
    }
    let _ = writeln!(
        out,
        "caps: rows/user/partition = {}, partitions/user = {}, distinct values/user = {}",
        policy.max_rows_per_user_per_partition, policy.max_partitions_per_user, policy.max_distinct_values_per_user
    );
    let _ = writeln!(out, "minimum frequency: k = {}", policy.k_min);
    out
}
