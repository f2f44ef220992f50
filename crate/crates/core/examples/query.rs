//! Runs private queries end to end against an in-memory SQLite database.

use dpsql::backend::SqliteAdapter;
use dpsql::catalog::{AccountantKind, GlobalBudget, PrivacyPolicy};
use dpsql::engine::{Engine, QueryRequest};
use dpsql::eval::{generate_dataset, tpch_catalog, SyntheticDatasetSpec};
use dpsql::frontdoor::render_result;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = tpch_catalog();
    let ds = generate_dataset(&SyntheticDatasetSpec::new(1, 3_000, 30_000, 120_000))?;
    let policy = PrivacyPolicy {
        k_min: 10,
        max_partitions_per_user: 3,
        max_rows_per_user_per_partition: 25,
        ..PrivacyPolicy::default()
    };
    let mut engine = Engine::new(
        catalog,
        policy,
        GlobalBudget::new(5.0, 1e-5, AccountantKind::Pld),
        Box::new(SqliteAdapter::in_memory()?),
    );
    engine.load_tables(&ds.tables)?;

    for sql in [
        "SELECT COUNT(*) FROM customer",
        "SELECT STDDEV(c_acctbal) FROM customer",
        "SELECT o_orderstatus, COUNT(*), AVG(o_totalprice) FROM orders GROUP BY o_orderstatus",
    ] {
        println!("> {sql}");
        let result = engine.run_query(&QueryRequest::new(sql, 1.0, 1e-7).with_seed(7))?;
        println!("{}", render_result(&result));
    }
    Ok(())
}
