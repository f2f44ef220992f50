//! Shows the statement sent to the database for a grouped join: rows are
//! clamped, capped per user and partition, and summed per user, so raw
//! column values never leave the database.

use dpsql::backend::{build_preagg_sql, fetch_user_partition_moments, SqliteAdapter};
use dpsql::catalog::PrivacyPolicy;
use dpsql::eval::{generate_dataset, tpch_catalog, SyntheticDatasetSpec};
use dpsql::validator::check_sql;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = tpch_catalog();
    let policy = PrivacyPolicy {
        max_rows_per_user_per_partition: 5,
        max_partitions_per_user: 2,
        ..PrivacyPolicy::default()
    };
    let sql = "SELECT c_mktsegment, AVG(o_totalprice) FROM orders JOIN customer ON o_custkey = c_custkey \
               WHERE o_orderstatus = 'F' GROUP BY c_mktsegment";
    let plan = check_sql(sql, &catalog).map_err(|e| format!("{e:?}"))?;
    for statement in build_preagg_sql(&plan, &catalog, &policy).statements() {
        println!("{statement}\n");
    }

    let ds = generate_dataset(&SyntheticDatasetSpec::new(3, 200, 1_000, 2_000))?;
    let mut db = SqliteAdapter::in_memory()?;
    ds.load_into(&mut db, &catalog)?;
    let rows = fetch_user_partition_moments(&mut db, &plan, &catalog, &policy)?;
    println!("{} (user, partition) rows, first three:", rows.len());
    for r in rows.iter().take(3) {
        println!("  {:?}", r);
    }
    Ok(())
}
