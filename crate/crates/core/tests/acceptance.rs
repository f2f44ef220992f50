//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line (written
//! straight to stdout so it shows even when output is captured) and then
//! asserts the verdict.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::{adapter_named, brute_force, noiseless_engine, relative_error, slack_policy, CountingAdapter};
use dpsql::accountant::{max_admissible_queries, MechanismEvent};
use dpsql::backend::{CachingAdapter, MemoryAdapter, TableData};
use dpsql::catalog::{AccountantKind, Catalog, GlobalBudget, PrivacyPolicy, WeightStrategy};
use dpsql::engine::{Engine, QueryRequest};
use dpsql::eval::{
    generate_dataset, median, relative_errors, released_components, run_benchmark, tpch_catalog, tpch_workload,
    BenchmarkConfig, MreReport, SyntheticDatasetSpec,
};
use dpsql::mechanisms::{calibrate_sigma, granularity_for, NoiseSpec};
use dpsql::thresholding::{apply_double_threshold, PartitionStats, ThresholdParams};
use dpsql::validator::{check_sql, Rejection};
use dpsql::Value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!("{} {name}: {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    assert!(pass, "{line}");
}

fn codes(sql: &str, catalog: &Catalog) -> Vec<String> {
    match check_sql(sql, catalog) {
        Ok(_) => Vec::new(),
        Err(Rejection::Syntax(_)) => vec!["SYNTAX_ERROR".into()],
        Err(Rejection::Invalid(errors)) => errors.iter().map(|e| e.code.as_str().to_string()).collect(),
    }
}

#[test]
fn validator_corpus() {
    let forbidden: &[(&str, &str)] = &[
        ("SELECT c_name FROM customer", "NON_AGGREGATE_OUTPUT"),
        ("SELECT c_mktsegment FROM customer GROUP BY c_mktsegment", "NON_AGGREGATE_OUTPUT"),
        ("SELECT COUNT(*) FROM (SELECT * FROM customer) t", "NESTED_SUBQUERY"),
        ("SELECT MEDIAN(c_acctbal) FROM customer", "UNSUPPORTED_AGGREGATE"),
        ("SELECT MAX(o_totalprice) FROM orders", "UNSUPPORTED_AGGREGATE"),
        ("SELECT SUM(l_quantity) FROM lineitem", "MISSING_PRIVACY_UNIT"),
        ("SELECT SUM(c_balance) FROM customer", "UNKNOWN_COLUMN"),
        ("SELECT COUNT(*) FROM supplier", "UNKNOWN_TABLE"),
        ("SELECT SUM(c_nationkey) FROM customer", "MISSING_CLAMP_BOUNDS"),
        ("SELECT COUNT(*) FROM customer LIMIT 5", "UNSUPPORTED_SYNTAX"),
        (
            "SELECT c_mktsegment, COUNT(*) FROM customer GROUP BY c_mktsegment HAVING COUNT(*) > 3",
            "UNSUPPORTED_SYNTAX",
        ),
        ("SELECT COUNT(*) OVER () FROM customer", "UNSUPPORTED_SYNTAX"),
        ("SELECT COUNT(*) FROM customer UNION SELECT COUNT(*) FROM orders", "UNSUPPORTED_SYNTAX"),
        ("SELEC COUNT(*) FROM customer", "SYNTAX_ERROR"),
    ];
    let catalog = tpch_catalog();
    let workload = tpch_workload();
    let accepted = workload.iter().filter(|q| check_sql(&q.sql, &catalog).is_ok()).count();
    let mut wrong = Vec::new();
    for (sql, code) in forbidden {
        let got = codes(sql, &catalog);
        if got.first().map(String::as_str) != Some(*code) {
            wrong.push(format!("{sql} -> {got:?}"));
        }
    }
    verdict(
        "validator corpus",
        accepted == workload.len() && workload.len() == 10 && wrong.is_empty(),
        format!(
            "{accepted}/{} workload queries accepted, {}/{} forbidden queries with expected code {wrong:?}",
            workload.len(),
            forbidden.len() - wrong.len(),
            forbidden.len()
        ),
    );
}

fn orders_catalog() -> Catalog {
    let mut c = Catalog::new();
    c.register_table(tpch_catalog().table("orders").unwrap().clone()).unwrap();
    c
}

fn orders_table(rows: &[(i64, usize, f64)]) -> TableData {
    const STATUS: [&str; 6] = ["A", "B", "C", "D", "E", "F"];
    TableData {
        schema: tpch_catalog().table("orders").unwrap().clone(),
        rows: rows
            .iter()
            .enumerate()
            .map(|(i, (u, s, p))| {
                vec![
                    Value::Int(i as i64),
                    Value::Int(*u),
                    Value::Text(STATUS[*s].into()),
                    Value::Real(*p),
                    Value::Text("3-MEDIUM".into()),
                ]
            })
            .collect(),
    }
}

/// Count of released groups violating the k rule in datasets `lo..hi`.
/// Even datasets run with the noisy threshold switched off, so only the
/// exact rule stands between a small group and the output.
fn frequency_violations(lo: u64, hi: u64) -> (u64, u64) {
    let (mut violations, mut released) = (0, 0);
    let catalog = orders_catalog();
    for i in lo..hi {
        let mut rng = ChaCha20Rng::seed_from_u64(i);
        let k = [1u32, 2, 3, 5][rng.random_range(0..4)];
        let rows: Vec<(i64, usize, f64)> = (0..rng.random_range(1..40))
            .map(|_| (rng.random_range(0..10), rng.random_range(0..6), rng.random_range(0.0..1e5)))
            .collect();
        let mut users: BTreeMap<String, BTreeSet<i64>> = BTreeMap::new();
        let table = orders_table(&rows);
        for r in &table.rows {
            let (Value::Text(s), Value::Int(u)) = (&r[2], &r[1]) else { unreachable!() };
            users.entry(s.clone()).or_default().insert(*u);
        }
        let policy = PrivacyPolicy {
            k_min: k,
            max_partitions_per_user: rng.random_range(1..4),
            max_rows_per_user_per_partition: rng.random_range(1..4),
            ..PrivacyPolicy::default()
        };
        let mut engine = if i % 2 == 0 {
            noiseless_engine(catalog.clone(), policy, Box::new(MemoryAdapter::new()))
        } else {
            let budget = GlobalBudget::new(1e9, 0.5, AccountantKind::Rdp);
            Engine::new(catalog.clone(), policy, budget, Box::new(MemoryAdapter::new()))
        };
        engine.load_tables(&[table]).unwrap();
        let sql = "SELECT o_orderstatus, COUNT(*), AVG(o_totalprice) FROM orders GROUP BY o_orderstatus";
        let eps = [0.1, 1.0, 10.0][rng.random_range(0..3)];
        let r = engine.run_query(&QueryRequest::new(sql, eps, 1e-6).with_seed(i)).unwrap();
        for row in &r.rows {
            let Value::Text(s) = &row[0] else { unreachable!() };
            released += 1;
            if users.get(s).map_or(0, BTreeSet::len) < k as usize {
                violations += 1;
            }
        }
    }
    (violations, released)
}

#[test]
fn frequency_rule_exact() {
    const DATASETS: u64 = 100_000;
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()) as u64;
    let chunk = DATASETS.div_ceil(threads);
    let (violations, released) = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| s.spawn(move || frequency_violations(t * chunk, ((t + 1) * chunk).min(DATASETS))))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    });
    verdict(
        "frequency rule",
        violations == 0 && released > 0,
        format!("{DATASETS} datasets, {released} groups released, {violations} below k"),
    );
}

#[test]
fn thresholding_delta_bound() {
    const TRIALS: u64 = 100_000;
    let policy = PrivacyPolicy::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for (c_part, delta_t) in [(1u32, 0.01), (3, 0.03), (1, 1e-3)] {
        let sigma = calibrate_sigma(0.5, 1e-6, f64::from(c_part).sqrt()).unwrap();
        let params = ThresholdParams::new(1, sigma, delta_t, c_part).unwrap();
        let noise = NoiseSpec::new(sigma, granularity_for(1.0, policy.granularity_exponent)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(u64::from(c_part) ^ delta_t.to_bits());
        let mut released = 0u64;
        for _ in 0..TRIALS {
            let stats = [PartitionStats {
                key: vec![Value::Int(0)],
                exact_distinct_users: 1,
                clamped_count: 1,
                noisy_count: Some(noise.privatize(1.0, &mut rng)),
            }];
            released += apply_double_threshold(&stats, &params).released.len() as u64;
        }
        let freq = released as f64 / TRIALS as f64;
        let se = (delta_t * (1.0 - delta_t) / TRIALS as f64).sqrt();
        let ok = freq <= delta_t + 3.0 * se;
        pass &= ok;
        lines.push(format!("C_part={c_part} δ_t={delta_t}: {freq:.5} ≤ {:.5}", delta_t + 3.0 * se));
    }
    verdict("thresholding delta bound", pass, lines.join("; "));
}

#[test]
fn sampler_statistics() {
    const DRAWS: usize = 1_000_000;
    let g = granularity_for(1.0, PrivacyPolicy::default().granularity_exponent);
    let noise = NoiseSpec::new(1.0, g).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let (mut sum, mut sum2, mut off_grid) = (0.0, 0.0, 0usize);
    for _ in 0..DRAWS {
        let x = noise.sample(&mut rng);
        sum += x;
        sum2 += x * x;
        if (x / g).fract() != 0.0 {
            off_grid += 1;
        }
    }
    let mean = sum / DRAWS as f64;
    let var = sum2 / DRAWS as f64 - mean * mean;
    verdict(
        "sampler statistics",
        mean.abs() <= 4e-3 && (var - 1.0).abs() <= 0.01 && off_grid == 0,
        format!("mean {mean:.5}, variance {var:.5}, {off_grid} draws off the 2^{} grid", g.log2()),
    );
}

/// δ(ε) of `N(Δ, σ²)` against `N(0, σ²)` by Simpson quadrature of
/// `∫ max(0, p(x) − e^ε q(x)) dx`.
fn quadrature_delta(epsilon: f64, sigma: f64, sens: f64) -> f64 {
    let x0 = epsilon * sigma * sigma / sens + sens / 2.0;
    let h_target = sigma.min(sigma * sigma / sens) / 400.0;
    let span = 40.0 * sigma;
    let n = ((span / h_target).ceil() as usize).next_multiple_of(2);
    let h = span / n as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |x: f64| {
        let p = norm * (-(x - sens).powi(2) / (2.0 * sigma * sigma)).exp();
        let loss = (2.0 * sens * x - sens * sens) / (2.0 * sigma * sigma);
        p * (-(epsilon - loss).exp_m1()).max(0.0)
    };
    let mut acc = f(x0) + f(x0 + span);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(x0 + i as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn calibration_soundness() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut worst_over = 0.0f64;
    let mut worst_slack = 0.0f64;
    let mut bad = Vec::new();
    for _ in 0..100 {
        let eps = 10f64.powf(rng.random_range(-2.0..1.0));
        let delta = 10f64.powf(rng.random_range(-12.0..-2.0));
        let sens = 10f64.powf(rng.random_range(-2.0..4.0));
        let sigma = calibrate_sigma(eps, delta, sens).unwrap();
        let d = quadrature_delta(eps, sigma, sens);
        let rel = (d - delta) / delta;
        worst_over = worst_over.max(rel);
        worst_slack = worst_slack.max(-rel);
        if rel > 1e-6 || -rel > 1e-6 {
            bad.push(format!("(ε={eps:.3}, δ={delta:.2e}, Δ={sens:.3}) → δ(ε)={d:.6e}"));
        }
    }
    verdict(
        "calibration soundness",
        bad.is_empty(),
        format!(
            "100 triples, worst excess {worst_over:.2e}, worst slack {worst_slack:.2e} (relative) {}",
            bad.join("; ")
        ),
    );
}

fn basic_composition_count(per: (f64, f64), global: (f64, f64)) -> u64 {
    ((global.0 / per.0).min(global.1 / per.1) + 1e-9).floor() as u64
}

#[test]
fn accounting_tightness() {
    let per = (0.1, 1e-7);
    let sigma = calibrate_sigma(per.0, per.1, 1.0).unwrap();
    let query = [MechanismEvent::gaussian(sigma, 1.0, "query")];
    let mut lines = Vec::new();
    let mut pass = true;
    for (global, strict) in [((1.0, 2e-7), true), ((0.2, 1e-6), false)] {
        let pld = max_admissible_queries(&query, &GlobalBudget::new(global.0, global.1, AccountantKind::Pld));
        let basic = basic_composition_count(per, global);
        let ok = if strict { pld > basic } else { pld >= basic };
        pass &= ok;
        lines.push(format!("global {global:?}: PLD {pld} vs basic {basic}"));
    }
    verdict("accounting tightness", pass, lines.join("; "));
}

#[test]
fn noiseless_oracle_equivalence() {
    let ds = generate_dataset(&SyntheticDatasetSpec::new(1000, 1000, 3000, 8000)).unwrap();
    let catalog = ds.fitted_catalog();
    let expected = brute_force(&ds);
    let mut adapter = adapter_named("sqlite");
    ds.load_into(adapter.as_mut(), &catalog).unwrap();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for q in tpch_workload() {
        let policy = PrivacyPolicy {
            k_min: 1,
            ..slack_policy(&q.sql, &catalog, adapter.as_mut())
        };
        let mut engine = noiseless_engine(catalog.clone(), policy, adapter);
        let result = engine.run_query(&QueryRequest::new(q.sql.clone(), 1.0, 1e-6).with_seed(3));
        adapter = engine.into_adapter();
        let Ok(result) = result else {
            failures.push(format!("{}: {:?}", q.name, result.err()));
            continue;
        };
        let got = released_components(&check_sql(&q.sql, &catalog).unwrap(), &result.rows);
        let want = &expected[q.name.as_str()];
        if got.len() != want.len() {
            failures.push(format!("{}: {} groups, expected {}", q.name, got.len(), want.len()));
        }
        for (key, truth) in want {
            match got.get(key) {
                Some(v) => {
                    let e = relative_error(v[0], *truth);
                    worst = worst.max(e);
                    if e > 1e-6 {
                        failures.push(format!("{} {key:?}: {} vs {truth}", q.name, v[0]));
                    }
                }
                None => failures.push(format!("{} {key:?} missing", q.name)),
            }
        }
    }
    verdict(
        "noiseless oracle equivalence",
        failures.is_empty(),
        format!("10 queries on 1,000 customers, worst relative error {worst:.2e} {failures:?}"),
    );
}

fn desk_benchmark(queries: &[&str], epsilons: Vec<f64>, trials: usize, weights: WeightStrategy) -> MreReport {
    let ds = generate_dataset(&SyntheticDatasetSpec::desk_scale(0)).unwrap();
    let catalog = ds.fitted_catalog();
    let mut adapter = CachingAdapter::new(MemoryAdapter::new());
    ds.load_into(&mut adapter, &catalog).unwrap();
    let workload: Vec<_> = tpch_workload().into_iter().filter(|q| queries.contains(&q.name.as_str())).collect();
    let config = BenchmarkConfig {
        epsilons,
        trials,
        seed: 1,
        weights,
        ..BenchmarkConfig::default()
    };
    run_benchmark(Box::new(adapter), &catalog, &workload, &config).unwrap().0
}

#[test]
fn mre_trend() {
    let epsilons = vec![0.1, 1.0, 10.0];
    let trend = desk_benchmark(&["COUNT", "SUM", "AVG"], epsilons.clone(), 25, WeightStrategy::Optimized);
    let mut pass = true;
    let mut lines = Vec::new();
    for q in ["COUNT", "SUM", "AVG"] {
        let medians: Vec<f64> = epsilons
            .iter()
            .map(|&e| {
                let row = trend.row(q, e).unwrap();
                median(&relative_errors(&row.truth, &row.estimates)).unwrap_or(f64::NAN)
            })
            .collect();
        let ok = medians.windows(2).all(|w| w[1] < w[0]);
        pass &= ok;
        lines.push(format!("{q} {medians:.4?}"));
    }
    let weighted = desk_benchmark(&["VAR", "COVAR"], vec![1.0], 100, WeightStrategy::Optimized);
    let uniform = desk_benchmark(&["VAR", "COVAR"], vec![1.0], 100, WeightStrategy::Uniform);
    for q in ["VAR", "COVAR"] {
        let w = weighted.row(q, 1.0).unwrap().outcome.mre.unwrap_or(f64::NAN);
        let u = uniform.row(q, 1.0).unwrap().outcome.mre.unwrap_or(f64::NAN);
        pass &= w < u;
        lines.push(format!("{q} weighted {w:.4}% vs uniform {u:.4}%"));
    }
    verdict("MRE trend", pass, lines.join("; "));
}

#[test]
fn count_mre_magnitude() {
    let report = desk_benchmark(&["COUNT"], vec![1.0], 400, WeightStrategy::Optimized);
    let row = report.row("COUNT", 1.0).unwrap();
    let sigma = row.sigmas[0];
    let predicted = 100.0 * sigma * (2.0 / std::f64::consts::PI).sqrt() / 15_000.0;
    let got = row.outcome.mre.unwrap_or(f64::NAN);
    let ratio = got / predicted;
    verdict(
        "COUNT MRE magnitude",
        (0.3..=3.0).contains(&ratio),
        format!("σ = {sigma:.4}, MRE {got:.5}% vs predicted {predicted:.5}% (ratio {ratio:.3})"),
    );
}

fn mutate(sql: &str, rng: &mut ChaCha20Rng) -> String {
    let mut chars: Vec<char> = sql.chars().collect();
    match rng.random_range(0..3) {
        0 if !chars.is_empty() => {
            chars.remove(rng.random_range(0..chars.len()));
        }
        1 => {
            let junk = ['(', ')', ',', '*', ';', 'x', '\'', ' '];
            chars.insert(rng.random_range(0..=chars.len()), junk[rng.random_range(0..junk.len())]);
        }
        _ => {
            let i = rng.random_range(0..chars.len().max(1));
            chars.truncate(i);
        }
    }
    chars.into_iter().collect()
}

#[test]
fn pipeline_safety() {
    let ds = generate_dataset(&SyntheticDatasetSpec::new(5, 300, 1000, 3000)).unwrap();
    let catalog = ds.fitted_catalog();
    let calls = Arc::new(AtomicUsize::new(0));
    let mut inner = MemoryAdapter::new();
    ds.load_into(&mut inner, &catalog).unwrap();
    let adapter = CountingAdapter {
        inner,
        calls: calls.clone(),
    };
    let policy = PrivacyPolicy {
        k_min: 3,
        max_partitions_per_user: 3,
        max_rows_per_user_per_partition: 5,
        ..PrivacyPolicy::default()
    };
    let budget = GlobalBudget::new(4.0, 1e-5, AccountantKind::Pld);
    let mut engine = Engine::new(catalog.clone(), policy, budget, Box::new(adapter));
    let workload = tpch_workload();
    let forbidden = [
        "SELECT c_name FROM customer",
        "SELECT MAX(o_totalprice) FROM orders",
        "SELECT SUM(l_quantity) FROM lineitem",
        "SELECT COUNT(*) FROM customer LIMIT 1",
        "DELETE FROM customer",
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let (mut stage1, mut stage2, mut ok, mut leaks) = (0, 0, 0, Vec::new());
    for i in 0..500 {
        let base = &workload[rng.random_range(0..workload.len())].sql;
        let (sql, eps, delta) = match rng.random_range(0..6) {
            0 => (mutate(base, &mut rng), 0.05, 1e-8),
            1 => (forbidden[rng.random_range(0..forbidden.len())].to_string(), 0.05, 1e-8),
            2 => (base.clone(), [0.0, -1.0, f64::NAN, f64::INFINITY][rng.random_range(0..4)], 1e-8),
            3 => (base.clone(), 0.05, [0.0, 1.0, 2.0, f64::NAN][rng.random_range(0..4)]),
            4 => (base.clone(), rng.random_range(5.0..50.0), 1e-8),
            _ => (base.clone(), rng.random_range(0.01..0.2), 1e-8),
        };
        let before_calls = calls.load(Ordering::SeqCst);
        let before_events = engine.ledger().events().len();
        match engine.run_query(&QueryRequest::new(sql.clone(), eps, delta).with_seed(i)) {
            Ok(_) => ok += 1,
            Err(e) if e.stage() <= 2 => {
                if e.stage() == 1 {
                    stage1 += 1;
                } else {
                    stage2 += 1;
                }
                let touched = calls.load(Ordering::SeqCst) != before_calls;
                let charged = engine.ledger().events().len() != before_events;
                if touched || charged {
                    leaks.push(format!("{sql:?} ({}): backend {touched}, charged {charged}", e.code()));
                }
            }
            Err(e) => leaks.push(format!("{sql:?}: unexpected {e}")),
        }
    }
    verdict(
        "pipeline safety",
        leaks.is_empty() && stage1 > 0 && stage2 > 0,
        format!(
            "500 requests: {ok} answered, {stage1} failed validation, {stage2} over budget, {} reached the backend {leaks:?}",
            leaks.len()
        ),
    );
}
