//! Data-engine adapters, the per-user pre-aggregation SQL and two-stage
//! contribution bounding.

mod bounding;
mod memory;
mod preagg;
mod sqlite;

use std::collections::HashMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::{Catalog, DataType, TableSchema};
use crate::Value;

pub use bounding::{partition_order_hash, two_stage_bound, BoundedPartition, BoundedPartitionTable};
pub use memory::MemoryAdapter;
pub use preagg::{
    build_preagg_sql, build_row_level_sql, fetch_user_partition_moments, Contribution, PreAggSql, UserPartitionMoments,
};
pub use sqlite::SqliteAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    /// `ROW_NUMBER() OVER (PARTITION BY … ORDER BY …)` is available.
    pub row_numbering: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RowSet {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl RowSet {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("{code}: {message} (in: {sql})")]
    Sql { code: String, message: String, sql: String },
    #[error("{0}")]
    Load(String),
    #[error("unexpected result shape: {0}")]
    Shape(String),
}

impl BackendError {
    pub(crate) fn sql(code: &str, message: impl Into<String>, sql: &str) -> Self {
        BackendError::Sql {
            code: code.to_string(),
            message: message.into(),
            sql: sql.to_string(),
        }
    }
}

/// Rows of one table, in column order of its schema.
#[derive(Debug, Clone, PartialEq)]
pub struct TableData {
    pub schema: TableSchema,
    pub rows: Vec<Vec<Value>>,
}

impl TableData {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.columns.iter().position(|c| c.name == name)
    }
}

/// A SQL data engine the proxy delegates execution to.
pub trait BackendAdapter: Send {
    fn capabilities(&self) -> Capabilities;

    /// Runs one read-only statement.
    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError>;

    /// Creates (or replaces) a table and bulk-inserts rows.
    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError>;
}

impl<T: BackendAdapter + ?Sized> BackendAdapter for Box<T> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }

    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError> {
        (**self).execute(sql)
    }

    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError> {
        (**self).load_table(data)
    }
}

/// Opens an adapter from a connection descriptor: `memory`, `sqlite::memory:`
/// or `sqlite:<path>`.
pub fn connect(descriptor: &str) -> Result<Box<dyn BackendAdapter>, BackendError> {
    match descriptor {
        "memory" | "" => Ok(Box::new(MemoryAdapter::new())),
        "sqlite::memory:" => Ok(Box::new(SqliteAdapter::in_memory()?)),
        d => match d.strip_prefix("sqlite:") {
            Some(path) => Ok(Box::new(SqliteAdapter::open(path)?)),
            None => Err(BackendError::Connection(format!("unknown backend descriptor '{d}'"))),
        },
    }
}

/// Loads every table of `data` whose schema is registered in `catalog`,
/// checking that the column lists agree.
pub fn load_dataset(adapter: &mut dyn BackendAdapter, catalog: &Catalog, data: &[TableData]) -> Result<(), BackendError> {
    for t in data {
        let Some(registered) = catalog.table(&t.schema.name) else {
            return Err(BackendError::Load(format!("table '{}' is not in the catalog", t.schema.name)));
        };
        let names = |s: &TableSchema| s.columns.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
        if names(registered) != names(&t.schema) {
            return Err(BackendError::Load(format!(
                "columns of '{}' do not match the catalog",
                t.schema.name
            )));
        }
        adapter.load_table(t)?;
    }
    Ok(())
}

/// Parses one table from CSV with a header row. Empty fields are NULL.
pub fn read_csv_table<R: std::io::Read>(schema: &TableSchema, reader: R) -> Result<TableData, BackendError> {
    let fail = |msg: String| BackendError::Load(format!("{}: {msg}", schema.name));
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| fail(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == &c.name)
                .ok_or_else(|| fail(format!("missing column '{}'", c.name)))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        let mut row = Vec::with_capacity(positions.len());
        for (c, &p) in schema.columns.iter().zip(&positions) {
            let text = record.get(p).unwrap_or("");
            let bad = || fail(format!("row {}: '{text}' is not a valid {:?} for '{}'", line + 1, c.dtype, c.name));
            row.push(match (text, c.dtype) {
                ("", _) => Value::Null,
                (t, DataType::Integer) => Value::Int(t.trim().parse().map_err(|_| bad())?),
                (t, DataType::Real) => Value::Real(t.trim().parse().map_err(|_| bad())?),
                (t, DataType::Boolean) => match t.trim().to_ascii_lowercase().as_str() {
                    "true" | "1" => Value::Bool(true),
                    "false" | "0" => Value::Bool(false),
                    _ => return Err(bad()),
                },
                (t, DataType::Text) => Value::Text(t.to_string()),
            });
        }
        rows.push(row);
    }
    Ok(TableData {
        schema: schema.clone(),
        rows,
    })
}

/// Loads `<dir>/<table>.csv` for every catalog table that has such a file;
/// returns the names of the loaded tables.
pub fn load_csv_dir(
    adapter: &mut dyn BackendAdapter,
    catalog: &Catalog,
    dir: &std::path::Path,
) -> Result<Vec<String>, BackendError> {
    let mut loaded = Vec::new();
    for schema in catalog.tables() {
        let path = dir.join(format!("{}.csv", schema.name));
        if !path.exists() {
            continue;
        }
        let file = std::fs::File::open(&path).map_err(|e| BackendError::Load(format!("{}: {e}", path.display())))?;
        adapter.load_table(&read_csv_table(schema, file)?)?;
        loaded.push(schema.name.clone());
    }
    Ok(loaded)
}

/// Writes rows as CSV with a header row; NULL becomes an empty field.
pub fn write_csv_table<W: std::io::Write>(data: &TableData, writer: W) -> Result<(), BackendError> {
    let fail = |e: csv::Error| BackendError::Load(format!("{}: {e}", data.schema.name));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(data.schema.columns.iter().map(|c| c.name.as_str())).map_err(fail)?;
    for r in &data.rows {
        w.write_record(r.iter().map(|v| match v {
            Value::Null => String::new(),
            Value::Text(s) => s.clone(),
            other => other.to_string(),
        }))
        .map_err(fail)?;
    }
    w.flush().map_err(|e| BackendError::Load(e.to_string()))
}

/// Memoizes results by statement text; valid while the data is static.
pub struct CachingAdapter<A> {
    inner: A,
    cache: HashMap<String, Arc<RowSet>>,
    hits: u64,
}

impl<A: BackendAdapter> CachingAdapter<A> {
    pub fn new(inner: A) -> Self {
        CachingAdapter {
            inner,
            cache: HashMap::new(),
            hits: 0,
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn into_inner(self) -> A {
        self.inner
    }
}

impl<A: BackendAdapter> BackendAdapter for CachingAdapter<A> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError> {
        if let Some(r) = self.cache.get(sql) {
            self.hits += 1;
            return Ok((**r).clone());
        }
        let r = self.inner.execute(sql)?;
        self.cache.insert(sql.to_string(), Arc::new(r.clone()));
        Ok(r)
    }

    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError> {
        self.cache.clear();
        self.inner.load_table(data)
    }
}

/// Coerces a raw value to the declared column type.
pub(crate) fn coerce(v: Value, dtype: DataType) -> Value {
    match (dtype, v) {
        (_, Value::Null) => Value::Null,
        (DataType::Integer, Value::Real(r)) if r.fract() == 0.0 && r.abs() < 9.0e18 => Value::Int(r as i64),
        (DataType::Real, Value::Int(i)) => Value::Real(i as f64),
        (DataType::Boolean, Value::Int(i)) => Value::Bool(i != 0),
        (_, v) => v,
    }
}
