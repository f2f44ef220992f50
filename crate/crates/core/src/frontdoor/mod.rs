//! Command line and HTTP entry points.

pub mod http;

use std::ffi::OsString;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::backend::{read_csv_table, BackendAdapter, CachingAdapter, MemoryAdapter, SqliteAdapter};
use crate::catalog::{load_config, EngineConfig, WeightStrategy};
use crate::engine::{Engine, EngineError, QueryRequest, QueryResult};
use crate::eval::{generate_dataset, run_benchmark, tpch_workload, SyntheticDatasetSpec};
use crate::validator::{check_sql, explain, Rejection};

pub use http::{router, serve, ApiError, AppState};

#[derive(Debug, Parser)]
#[command(name = "dpsql", version, about = "Private SQL over a proxy with user-level differential privacy")]
pub struct Cli {
    /// Engine configuration (catalog, policy, budget).
    #[arg(long, env = "DPSQL_CONFIG", global = true)]
    pub config: Option<PathBuf>,

    /// Ledger file: imported at start, rewritten after every charge.
    #[arg(long, global = true)]
    pub ledger: Option<PathBuf>,

    /// Directory of `<table>.csv` files to load into the backend.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a query and print its plan.
    Validate {
        #[arg(long)]
        sql: String,
    },
    /// Run one query and print the released table and mechanism report.
    Query(QueryArgs),
    /// Print the budget status.
    Budget {
        #[arg(long)]
        json: bool,
    },
    /// Run the utility benchmark on synthetic data and print CSV.
    Bench(BenchArgs),
    /// Start the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static assets served outside `/v1`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub sql: String,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: f64,
    #[arg(long, allow_negative_numbers = true)]
    pub delta: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report the verdict and noise parameters without charging.
    #[arg(long)]
    pub dry_run: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BenchBackend {
    Memory,
    Sqlite,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Weights {
    Optimized,
    Uniform,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0, 10.0])]
    pub epsilons: Vec<f64>,
    #[arg(long, default_value_t = 1e-7)]
    pub delta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 15_000)]
    pub customers: usize,
    #[arg(long, default_value_t = 150_000)]
    pub orders: usize,
    #[arg(long, default_value_t = 600_000)]
    pub lineitems: usize,
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    pub corr: f64,
    #[arg(long, value_enum, default_value = "optimized")]
    pub weights: Weights,
    #[arg(long, value_enum, default_value = "sqlite")]
    pub backend: BenchBackend,
    /// Only run these queries (by workload name).
    #[arg(long, value_delimiter = ',')]
    pub queries: Vec<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn read_config(path: Option<&Path>) -> Result<EngineConfig, Failure> {
    let path = path.ok_or_else(|| Failure("no configuration: pass --config or set DPSQL_CONFIG".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    Ok(load_config(&text)?)
}

fn build_engine(cli: &Cli) -> Result<Engine, Failure> {
    let config = read_config(cli.config.as_deref())?;
    let mut engine = Engine::from_config(config)?;
    if let Some(dir) = &cli.data {
        let catalog = engine.catalog().clone();
        let mut tables = Vec::new();
        for schema in catalog.tables() {
            let path = dir.join(format!("{}.csv", schema.name));
            if path.exists() {
                let file = std::fs::File::open(&path).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
                tables.push(read_csv_table(schema, file)?);
            }
        }
        engine.load_tables(&tables)?;
    }
    if let Some(path) = &cli.ledger {
        if path.exists() {
            engine.import_ledger(&std::fs::read_to_string(path)?)?;
        }
    }
    Ok(engine)
}

fn save_ledger(cli: &Cli, engine: &Engine) -> Result<(), Failure> {
    if let Some(path) = &cli.ledger {
        std::fs::write(path, engine.export_ledger()).map_err(|e| Failure(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn engine_failure(e: &EngineError) -> Failure {
    Failure(format!("{}: {e}", e.code()))
}

/// Plain-text rendering of a released table.
pub fn render_result(r: &QueryResult) -> String {
    let mut out = String::new();
    out.push_str(&r.columns.join("\t"));
    out.push('\n');
    for row in &r.rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out.push_str(&format!("({} rows, {} suppressed groups)\n", r.rows.len(), r.suppressed_groups));
    let m = &r.mechanism_report;
    if let Some(t) = &m.threshold {
        out.push_str(&format!(
            "threshold: k = {}, tau = {}, sigma = {:.6}, delta_t = {:e}\n",
            t.k,
            t.tau.map_or("-inf".to_string(), |x| format!("{x:.6}")),
            t.count.sigma,
            t.delta_threshold
        ));
    }
    for a in &m.aggregates {
        if a.reuses_threshold_count {
            out.push_str(&format!("{}: reuses the threshold count\n", a.alias));
            continue;
        }
        for n in &a.noise {
            out.push_str(&format!(
                "{}: sigma = {:.6}, sensitivity = {:.6}, epsilon = {:.6}\n",
                n.label, n.sigma, n.sensitivity.global_l2, n.epsilon
            ));
        }
    }
    out.push_str(&format!(
        "remaining: epsilon {:.6}, delta {:.4e}\n",
        r.budget_remaining.epsilon, r.budget_remaining.delta
    ));
    out
}

fn bench(args: &BenchArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let spec = SyntheticDatasetSpec::new(args.seed, args.customers, args.orders, args.lineitems).with_corr(args.corr);
    let ds = generate_dataset(&spec)?;
    let catalog = ds.fitted_catalog();
    let mut adapter: Box<dyn BackendAdapter> = match args.backend {
        BenchBackend::Memory => Box::new(CachingAdapter::new(MemoryAdapter::new())),
        BenchBackend::Sqlite => Box::new(CachingAdapter::new(SqliteAdapter::in_memory()?)),
    };
    ds.load_into(adapter.as_mut(), &catalog)?;
    let workload: Vec<_> = tpch_workload()
        .into_iter()
        .filter(|q| args.queries.is_empty() || args.queries.iter().any(|n| n.eq_ignore_ascii_case(&q.name)))
        .collect();
    if workload.is_empty() {
        return Err(Failure("no workload query matches --queries".into()));
    }
    let config = crate::eval::BenchmarkConfig {
        epsilons: args.epsilons.clone(),
        delta: args.delta,
        trials: args.trials.max(1),
        seed: args.seed,
        weights: match args.weights {
            Weights::Optimized => WeightStrategy::Optimized,
            Weights::Uniform => WeightStrategy::Uniform,
        },
        k: 1,
    };
    let (report, _) = run_benchmark(adapter, &catalog, &workload, &config)?;
    let csv = report.to_csv()?;
    match &args.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| Failure(format!("{}: {e}", p.display())))?,
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    match &cli.command {
        Command::Validate { sql } => {
            let config = read_config(cli.config.as_deref())?;
            match check_sql(sql, &config.catalog) {
                Ok(summary) => {
                    out.write_all(explain(&summary, &config.policy).as_bytes())?;
                    Ok(0)
                }
                Err(Rejection::Syntax(e)) => {
                    writeln!(out, "SYNTAX_ERROR: {e}")?;
                    Ok(1)
                }
                Err(Rejection::Invalid(errors)) => {
                    for e in errors {
                        writeln!(out, "{e}")?;
                    }
                    Ok(1)
                }
            }
        }
        Command::Query(q) => {
            let mut engine = build_engine(cli)?;
            let request = QueryRequest {
                sql: q.sql.clone(),
                epsilon: q.epsilon,
                delta: q.delta,
                seed: q.seed,
            };
            if q.dry_run {
                let r = engine.dry_run(&request).map_err(|e| engine_failure(&e))?;
                if q.json {
                    writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
                } else {
                    writeln!(out, "{}", if r.admitted { "would admit" } else { "would deny" })?;
                    out.write_all(r.plan.as_bytes())?;
                    writeln!(
                        out,
                        "remaining now: epsilon {:.6}; after: epsilon {:.6}",
                        r.budget_remaining.epsilon, r.budget_after.epsilon
                    )?;
                }
                return Ok(if r.admitted { 0 } else { 1 });
            }
            let before = engine.ledger().events().len();
            let result = engine.run_query(&request);
            if engine.ledger().events().len() != before {
                save_ledger(cli, &engine)?;
            }
            let r = result.map_err(|e| engine_failure(&e))?;
            if q.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&r)?)?;
            } else {
                out.write_all(render_result(&r).as_bytes())?;
            }
            Ok(0)
        }
        Command::Budget { json } => {
            let engine = build_engine(cli)?;
            let status = engine.budget_status();
            if *json {
                writeln!(out, "{}", serde_json::to_string_pretty(&status)?)?;
            } else {
                writeln!(out, "{status}")?;
            }
            Ok(0)
        }
        Command::Bench(args) => {
            bench(args, out)?;
            Ok(0)
        }
        Command::Serve { addr, static_dir } => {
            let engine = build_engine(cli)?;
            let mut state = AppState::new(engine);
            if let Some(p) = &cli.ledger {
                state = state.with_ledger_path(p.clone());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, *addr, static_dir.clone()))?;
            Ok(0)
        }
    }
}

/// Runs the command line; returns the process exit code. Usage errors give
/// 2, failed requests 1.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(Failure(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}
