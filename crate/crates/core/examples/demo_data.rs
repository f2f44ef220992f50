//! Writes a small synthetic TPC-H-like database as CSV plus a matching
//! configuration file, ready for the command line:
//!
//! ```text
//! cargo run --example demo_data -- demo
//! cargo run -- --config demo/config.json --data demo query \
//!     --sql "SELECT AVG(c_acctbal) FROM customer" --epsilon 1 --delta 1e-7
//! ```

use std::fs::File;
use std::path::PathBuf;

use dpsql::backend::write_csv_table;
use dpsql::catalog::{AccountantKind, EngineConfig, GlobalBudget, PrivacyPolicy};
use dpsql::eval::{generate_dataset, tpch_catalog, SyntheticDatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    std::fs::create_dir_all(&dir)?;

    let ds = generate_dataset(&SyntheticDatasetSpec::new(42, 2_000, 20_000, 80_000))?;
    for t in &ds.tables {
        write_csv_table(t, File::create(dir.join(format!("{}.csv", t.schema.name)))?)?;
    }

    let policy = PrivacyPolicy {
        k_min: 5,
        max_partitions_per_user: 3,
        max_rows_per_user_per_partition: 20,
        max_distinct_values_per_user: 1,
        ..PrivacyPolicy::default()
    };
    let config = EngineConfig::new(tpch_catalog(), policy, GlobalBudget::new(10.0, 1e-5, AccountantKind::Pld));
    std::fs::write(dir.join("config.json"), config.to_json())?;
    println!("wrote {} tables and config.json to {}", ds.tables.len(), dir.display());
    Ok(())
}
