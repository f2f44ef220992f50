mod common;

use std::collections::{BTreeMap, HashSet};

use common::adapter_named;
use dpsql::backend::{
    build_preagg_sql, fetch_user_partition_moments, partition_order_hash, two_stage_bound, BackendAdapter,
    BackendError, BoundedPartitionTable, Contribution, MemoryAdapter, SqliteAdapter, TableData,
    UserPartitionMoments,
};
use dpsql::catalog::{Catalog, PrivacyPolicy};
use dpsql::eval::{generate_dataset, tpch_catalog, tpch_workload, SyntheticDatasetSpec};
use dpsql::mechanisms::{clamp, sensitivity_for, ClampBounds, MomentSet, Quantity};
use dpsql::sql::{parse_sql, SetExpr, TableFactor};
use dpsql::validator::check_sql;
use dpsql::Value;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

const HASH_KEY: &str = "test-key";

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn moments_close(a: &MomentSet, b: &MomentSet) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => close(x, y),
        (None, None) => true,
        _ => false,
    };
    a.n == b.n && close(a.s1, b.s1) && close(a.s2, b.s2) && opt(a.sy, b.sy) && opt(a.sxy, b.sxy)
}

fn random_rows(rng: &mut ChaCha20Rng, n: usize, users: i64, keys: i64) -> Vec<UserPartitionMoments> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let user = rng.random_range(0..users);
        let key = rng.random_range(0..keys);
        if !seen.insert((user, key)) {
            continue;
        }
        let values: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(-5.0..5.0)).collect();
        out.push(UserPartitionMoments {
            user: Value::Int(user),
            key: vec![Value::Int(key)],
            rows: values.len() as u64,
            contributions: vec![Contribution::Moments(MomentSet::of(&values))],
        });
    }
    out
}

/// Stage B restated: per user, rank the user's surviving keys by hash then
/// key, keep the first `c_part`, and add them up.
fn stage_b_oracle(
    rows: &[UserPartitionMoments],
    c_part: usize,
    survivors: Option<&HashSet<Vec<Value>>>,
) -> BTreeMap<Vec<Value>, (u64, u64, f64, f64)> {
    let users: Vec<&Value> = {
        let mut u: Vec<&Value> = rows.iter().map(|r| &r.user).collect();
        u.sort();
        u.dedup();
        u
    };
    let mut out: BTreeMap<Vec<Value>, (u64, u64, f64, f64)> = BTreeMap::new();
    for user in users {
        let mut mine: Vec<&UserPartitionMoments> = rows
            .iter()
            .filter(|r| &r.user == user && survivors.is_none_or(|s| s.contains(&r.key)))
            .collect();
        mine.sort_by_key(|r| (partition_order_hash(HASH_KEY, &r.user, &r.key), r.key.clone()));
        for r in mine.into_iter().take(c_part) {
            let Contribution::Moments(m) = &r.contributions[0] else { unreachable!() };
            let e = out.entry(r.key.clone()).or_default();
            e.0 += 1;
            e.1 += r.rows;
            e.2 += m.s1;
            e.3 += m.s2;
        }
    }
    out
}

fn assert_matches_oracle(table: &BoundedPartitionTable, oracle: &BTreeMap<Vec<Value>, (u64, u64, f64, f64)>) {
    assert_eq!(table.len(), oracle.len());
    for (key, (users, rows, s1, s2)) in oracle {
        let p = table.get(key).unwrap_or_else(|| panic!("missing {key:?}"));
        assert_eq!(p.exact_distinct_users, *users);
        assert_eq!(p.clamped_count, *rows);
        assert!(close(p.aggregates[0].s1, *s1) && close(p.aggregates[0].s2, *s2), "{key:?}");
    }
}

#[test]
fn stage_b_matches_brute_force_on_random_instances() {
    for seed in 0..20 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let rows = random_rows(&mut rng, 200, 40, 15);
        for c_part in 1..=5 {
            let table = two_stage_bound(&rows, HASH_KEY, c_part, None);
            assert_matches_oracle(&table, &stage_b_oracle(&rows, c_part as usize, None));

            let survivors: HashSet<Vec<Value>> = (0..15).filter(|k| k % 3 != 0).map(|k| vec![Value::Int(k)]).collect();
            let table = two_stage_bound(&rows, HASH_KEY, c_part, Some(&survivors));
            assert_matches_oracle(&table, &stage_b_oracle(&rows, c_part as usize, Some(&survivors)));
        }
    }
}

#[test]
fn stage_b_keeps_exactly_c_part_keys_per_user() {
    let rows: Vec<UserPartitionMoments> = (0..5)
        .map(|k| UserPartitionMoments {
            user: Value::Int(1),
            key: vec![Value::Int(k)],
            rows: 1,
            contributions: vec![Contribution::Moments(MomentSet::of(&[1.0]))],
        })
        .collect();
    let table = two_stage_bound(&rows, HASH_KEY, 2, None);
    assert_eq!(table.iter().map(|p| p.exact_distinct_users).sum::<u64>(), 2);
}

#[test]
fn slack_cap_is_plain_summation() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let rows = random_rows(&mut rng, 200, 40, 15);
    let table = two_stage_bound(&rows, HASH_KEY, 15, None);
    let mut plain: BTreeMap<Vec<Value>, f64> = BTreeMap::new();
    for r in &rows {
        let Contribution::Moments(m) = &r.contributions[0] else { unreachable!() };
        *plain.entry(r.key.clone()).or_default() += m.s1;
    }
    for (key, s1) in plain {
        assert!(close(table.get(&key).unwrap().aggregates[0].s1, s1));
    }
}

fn orders_only_catalog() -> Catalog {
    let mut c = Catalog::new();
    c.register_table(tpch_catalog().table("orders").unwrap().clone()).unwrap();
    c
}

fn orders_table(rows: Vec<(i64, &str, f64)>) -> TableData {
    TableData {
        schema: tpch_catalog().table("orders").unwrap().clone(),
        rows: rows
            .into_iter()
            .enumerate()
            .map(|(i, (user, status, price))| {
                vec![
                    Value::Int(i as i64),
                    Value::Int(user),
                    Value::Text(status.into()),
                    Value::Real(price),
                    Value::Text("1-URGENT".into()),
                ]
            })
            .collect(),
    }
}

fn random_orders(rng: &mut ChaCha20Rng, n: usize, users: i64) -> Vec<(i64, &'static str, f64)> {
    const STATUSES: [&str; 4] = ["F", "O", "P", "Q"];
    (0..n)
        .map(|_| {
            (
                rng.random_range(0..users),
                STATUSES[rng.random_range(0..4)],
                (rng.random_range(-50_000.0..700_000.0f64) * 100.0).round() / 100.0,
            )
        })
        .collect()
}

fn policy(c_row: u32, c_part: u32) -> PrivacyPolicy {
    PrivacyPolicy {
        max_rows_per_user_per_partition: c_row,
        max_partitions_per_user: c_part,
        max_distinct_values_per_user: 2,
        hash_key: HASH_KEY.into(),
        ..PrivacyPolicy::default()
    }
}

const GROUPED_SUM: &str = "SELECT o_orderstatus, SUM(o_totalprice) FROM orders GROUP BY o_orderstatus";

#[test]
fn stage_a_keeps_the_smallest_c_row_values() {
    let catalog = orders_only_catalog();
    let summary = check_sql(GROUPED_SUM, &catalog).unwrap();
    let bounds = ClampBounds::new(0.0, 600_000.0).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let raw = random_orders(&mut rng, 300, 12);
    for name in ["memory", "memory-no-windows", "sqlite"] {
        for c_row in [1, 2, 5] {
            let mut adapter = adapter_named(name);
            adapter.load_table(&orders_table(raw.clone())).unwrap();
            let got = fetch_user_partition_moments(adapter.as_mut(), &summary, &catalog, &policy(c_row, 4)).unwrap();

            let mut groups: BTreeMap<(i64, &str), Vec<f64>> = BTreeMap::new();
            for (u, s, p) in &raw {
                groups.entry((*u, s)).or_default().push(clamp(*p, bounds));
            }
            assert_eq!(got.len(), groups.len(), "{name}");
            for r in &got {
                let Value::Int(u) = r.user else { panic!() };
                let Value::Text(s) = &r.key[0] else { panic!() };
                let mut values = groups[&(u, s.as_str())].clone();
                values.sort_by(f64::total_cmp);
                values.truncate(c_row as usize);
                let Contribution::Moments(m) = &r.contributions[0] else { panic!() };
                assert!(m.n <= u64::from(c_row));
                assert_eq!(r.rows, values.len() as u64, "{name}");
                let want = MomentSet::of(&values);
                assert!(m.n == want.n && close(m.s1, want.s1), "{name} C_row={c_row}: {m:?} vs {values:?}");
            }
        }
    }
}

fn column_words(text: &str) -> HashSet<String> {
    text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn innermost_projection(sql: &str) -> String {
    let mut q = parse_sql(sql).unwrap();
    loop {
        let SetExpr::Select(select) = q.body else { panic!("not a select") };
        match &select.from[0].relation {
            TableFactor::Derived { subquery, .. } => q = (**subquery).clone(),
            TableFactor::Table { .. } => {
                return select.items.iter().map(|i| format!("{i:?}")).collect::<Vec<_>>().join(" ");
            }
        }
    }
}

#[test]
fn preagg_sql_projects_only_owner_keys_and_arguments() {
    let catalog = tpch_catalog();
    let all_columns: HashSet<String> = catalog
        .tables()
        .iter()
        .flat_map(|t| t.columns.iter().map(|c| c.name.clone()))
        .collect();
    let allowed: BTreeMap<&str, &[&str]> = BTreeMap::from([
        ("COUNT", &["c_custkey"][..]),
        ("COUNT_DISTINCT", &["c_custkey", "c_nationkey"][..]),
        ("SUM", &["c_custkey", "c_acctbal"][..]),
        ("AVG", &["c_custkey", "c_acctbal"][..]),
        ("VAR", &["c_custkey", "c_acctbal"][..]),
        ("STDDEV", &["c_custkey", "c_acctbal"][..]),
        ("COVAR", &["o_custkey", "l_extendedprice", "l_discount"][..]),
        ("JOIN", &["o_custkey", "o_totalprice"][..]),
        ("GROUPBY", &["o_custkey", "o_orderstatus", "o_totalprice"][..]),
        ("GROUPBY_JOIN", &["o_custkey", "c_mktsegment", "o_totalprice"][..]),
    ]);
    for q in tpch_workload() {
        let summary = check_sql(&q.sql, &catalog).unwrap();
        let sql = build_preagg_sql(&summary, &catalog, &policy(3, 2));
        for statement in sql.statements() {
            let projected = column_words(&innermost_projection(statement));
            for col in projected.intersection(&all_columns) {
                assert!(allowed[q.name.as_str()].contains(&col.as_str()), "{}: projects {col}", q.name);
            }
        }
    }
}

#[test]
fn preagg_output_columns_are_moments_only() {
    let ds = generate_dataset(&SyntheticDatasetSpec::new(2, 120, 300, 600)).unwrap();
    let catalog = tpch_catalog();
    let mut db = SqliteAdapter::in_memory().unwrap();
    ds.load_into(&mut db, &catalog).unwrap();
    let allowed = |c: &str| {
        c == "uid"
            || c == "nrows"
            || c == "v"
            || ["k", "n", "s1_", "s2_", "sy_", "sxy_"]
                .iter()
                .any(|p| c.strip_prefix(p).is_some_and(|d| !d.is_empty() && d.chars().all(|x| x.is_ascii_digit())))
    };
    for q in tpch_workload() {
        let summary = check_sql(&q.sql, &catalog).unwrap();
        for statement in build_preagg_sql(&summary, &catalog, &policy(3, 2)).statements() {
            let out = db.execute(statement).unwrap();
            for c in &out.columns {
                assert!(allowed(c), "{}: output column {c}", q.name);
            }
        }
    }
}

#[test]
fn preagg_sql_is_deterministic_and_groups_by_user_and_key() {
    let catalog = tpch_catalog();
    for q in tpch_workload() {
        let summary = check_sql(&q.sql, &catalog).unwrap();
        let a = build_preagg_sql(&summary, &catalog, &policy(3, 2));
        let b = build_preagg_sql(&check_sql(&q.sql, &catalog).unwrap(), &catalog, &policy(3, 2));
        assert_eq!(a, b);
        assert!(a.moments.contains("GROUP BY uid"), "{}", a.moments);
    }
    let covar = tpch_workload().into_iter().find(|q| q.name == "COVAR").unwrap();
    let sql = build_preagg_sql(&check_sql(&covar.sql, &catalog).unwrap(), &catalog, &policy(3, 2)).moments;
    assert!(sql.contains("sxy_0") && sql.contains("s2_0") && sql.contains("s1_0") && sql.contains("n0"));
    let gj = tpch_workload().into_iter().find(|q| q.name == "GROUPBY_JOIN").unwrap();
    let sql = build_preagg_sql(&check_sql(&gj.sql, &catalog).unwrap(), &catalog, &policy(3, 2)).moments;
    assert!(sql.contains("o_custkey") && sql.contains("c_custkey") && sql.contains("c_mktsegment"));
}

#[test]
fn adapters_agree_on_every_workload_query() {
    let ds = generate_dataset(&SyntheticDatasetSpec::new(4, 150, 600, 1500)).unwrap();
    let catalog = ds.fitted_catalog();
    let names = ["memory", "memory-no-windows", "sqlite"];
    let mut adapters: Vec<Box<dyn BackendAdapter>> = names.iter().map(|n| adapter_named(n)).collect();
    for a in &mut adapters {
        ds.load_into(a.as_mut(), &catalog).unwrap();
    }
    for q in tpch_workload() {
        let summary = check_sql(&q.sql, &catalog).unwrap();
        let results: Vec<Vec<UserPartitionMoments>> = adapters
            .iter_mut()
            .map(|a| fetch_user_partition_moments(a.as_mut(), &summary, &catalog, &policy(2, 2)).unwrap())
            .collect();
        for (i, r) in results.iter().enumerate().skip(1) {
            assert_eq!(r.len(), results[0].len(), "{} on {}", q.name, names[i]);
            for (x, y) in r.iter().zip(&results[0]) {
                assert_eq!((&x.user, &x.key, x.rows), (&y.user, &y.key, y.rows), "{}", q.name);
                for (cx, cy) in x.contributions.iter().zip(&y.contributions) {
                    match (cx, cy) {
                        (Contribution::Moments(a), Contribution::Moments(b)) => {
                            assert!(moments_close(a, b), "{} on {}: {a:?} vs {b:?}", q.name, names[i])
                        }
                        (a, b) => assert_eq!(a, b, "{}", q.name),
                    }
                }
            }
        }
    }
}

#[test]
fn three_row_count_gives_three_moment_rows() {
    let catalog = orders_only_catalog();
    let summary = check_sql("SELECT COUNT(*) FROM orders", &catalog).unwrap();
    let sql = build_preagg_sql(&summary, &catalog, &policy(1, 1));
    for mut adapter in [adapter_named("memory"), adapter_named("sqlite")] {
        adapter
            .load_table(&orders_table(vec![(1, "F", 1.0), (2, "O", 2.0), (3, "F", 3.0)]))
            .unwrap();
        let out = adapter.execute(&sql.moments).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert_eq!(adapter.execute(&sql.moments).unwrap(), out);
    }
}

#[test]
fn unknown_table_is_an_engine_error() {
    let mut memory = MemoryAdapter::new();
    assert!(matches!(memory.execute("SELECT COUNT(*) FROM nowhere"), Err(BackendError::Sql { .. })));
    let mut sqlite = SqliteAdapter::in_memory().unwrap();
    match sqlite.execute("SELECT COUNT(*) FROM nowhere") {
        Err(BackendError::Sql { sql, .. }) => assert!(sql.contains("nowhere")),
        other => panic!("{other:?}"),
    }
}

fn bounded(raw: &[(i64, &'static str, f64)], sql: &str, pol: &PrivacyPolicy) -> BoundedPartitionTable {
    let catalog = orders_only_catalog();
    let summary = check_sql(sql, &catalog).unwrap();
    let mut adapter = MemoryAdapter::new();
    adapter.load_table(&orders_table(raw.to_vec())).unwrap();
    let rows = fetch_user_partition_moments(&mut adapter, &summary, &catalog, pol).unwrap();
    two_stage_bound(&rows, &pol.hash_key, pol.max_partitions_per_user, None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Removing one user moves at most C_part partitions, each by at most
    /// the per-partition sensitivity of every quantity.
    #[test]
    fn neighbouring_datasets_respect_sensitivity(
        seed in any::<u64>(),
        c_row in 1u32..4,
        c_part in 1u32..4,
        victim in 0i64..6,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let raw = random_orders(&mut rng, 60, 6);
        let neighbour: Vec<_> = raw.iter().copied().filter(|r| r.0 != victim).collect();
        let sql = "SELECT o_orderstatus, VAR(o_totalprice) FROM orders GROUP BY o_orderstatus";
        let pol = policy(c_row, c_part);
        let a = bounded(&raw, sql, &pol);
        let b = bounded(&neighbour, sql, &pol);

        let bounds = [ClampBounds::new(0.0, 600_000.0).unwrap()];
        let sens = |q| sensitivity_for(q, &bounds, pol.caps()).unwrap().per_partition_l2;
        let (dn, ds1, ds2) = (sens(Quantity::Count), sens(Quantity::Sum), sens(Quantity::SumSquares));

        let empty = MomentSet::default();
        let mut keys: Vec<Vec<Value>> = a.iter().map(|p| p.key.clone()).collect();
        keys.extend(b.iter().map(|p| p.key.clone()));
        keys.sort();
        keys.dedup();
        let mut changed = 0;
        for key in keys {
            let ma = a.get(&key).map_or(&empty, |p| &p.aggregates[0]);
            let mb = b.get(&key).map_or(&empty, |p| &p.aggregates[0]);
            let users_a = a.get(&key).map_or(0, |p| p.exact_distinct_users);
            let users_b = b.get(&key).map_or(0, |p| p.exact_distinct_users);
            if ma != mb || users_a != users_b {
                changed += 1;
            }
            prop_assert!(users_a.abs_diff(users_b) <= 1);
            prop_assert!((ma.n as f64 - mb.n as f64).abs() <= dn);
            prop_assert!((ma.s1 - mb.s1).abs() <= ds1 * (1.0 + 1e-12));
            prop_assert!((ma.s2 - mb.s2).abs() <= ds2 * (1.0 + 1e-12));
        }
        prop_assert!(changed <= c_part as usize, "{} partitions changed", changed);
    }
}
