//! Starts the HTTP service on a small demo database.
//!
//! ```text
//! cargo run --example serve
//! curl -s localhost:8080/v1/query -d '{"sql": "SELECT COUNT(*) FROM customer", "epsilon": 0.5, "delta": 1e-7}'
//! curl -s localhost:8080/v1/budget
//! ```

use dpsql::backend::MemoryAdapter;
use dpsql::catalog::{AccountantKind, GlobalBudget, PrivacyPolicy};
use dpsql::engine::Engine;
use dpsql::eval::{generate_dataset, tpch_catalog, SyntheticDatasetSpec};
use dpsql::frontdoor::{serve, AppState};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let addr = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into()).parse()?;
    let ds = generate_dataset(&SyntheticDatasetSpec::new(5, 1_000, 10_000, 40_000))?;
    let policy = PrivacyPolicy {
        k_min: 5,
        max_partitions_per_user: 3,
        max_rows_per_user_per_partition: 20,
        ..PrivacyPolicy::default()
    };
    let mut engine = Engine::new(
        tpch_catalog(),
        policy,
        GlobalBudget::new(10.0, 1e-5, AccountantKind::Pld),
        Box::new(MemoryAdapter::new()),
    );
    engine.load_tables(&ds.tables)?;
    serve(AppState::new(engine), addr, None).await?;
    Ok(())
}
