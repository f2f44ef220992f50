//! Mean relative error of the benchmark workload on a small synthetic
//! database. `dpsql bench` runs the same harness at full scale.

use dpsql::backend::{CachingAdapter, SqliteAdapter};
use dpsql::eval::{generate_dataset, run_benchmark, tpch_workload, BenchmarkConfig, SyntheticDatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_dataset(&SyntheticDatasetSpec::new(11, 1_500, 15_000, 60_000))?;
    let catalog = ds.fitted_catalog();
    let mut db = CachingAdapter::new(SqliteAdapter::in_memory()?);
    ds.load_into(&mut db, &catalog)?;
    let config = BenchmarkConfig {
        trials: 5,
        ..BenchmarkConfig::default()
    };
    let (report, _) = run_benchmark(Box::new(db), &catalog, &tpch_workload(), &config)?;
    print!("{}", report.to_csv()?);
    Ok(())
}
