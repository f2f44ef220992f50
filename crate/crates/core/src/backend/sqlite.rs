use rusqlite::types::ValueRef;
use rusqlite::Connection;

use crate::catalog::DataType;
use crate::sql::quote_ident;
use crate::Value;

use super::{BackendAdapter, BackendError, Capabilities, RowSet, TableData};

/// Adapter for an embedded SQLite database (file or in-memory).
pub struct SqliteAdapter {
    conn: Connection,
}

impl SqliteAdapter {
    pub fn open(path: &str) -> Result<Self, BackendError> {
        Connection::open(path)
            .map(|conn| SqliteAdapter { conn })
            .map_err(|e| BackendError::Connection(format!("{path}: {e}")))
    }

    pub fn in_memory() -> Result<Self, BackendError> {
        Connection::open_in_memory()
            .map(|conn| SqliteAdapter { conn })
            .map_err(|e| BackendError::Connection(e.to_string()))
    }
}

fn error_code(e: &rusqlite::Error) -> &'static str {
    let text = e.to_string();
    if text.contains("no such table") {
        "UNKNOWN_TABLE"
    } else if text.contains("no such column") {
        "UNKNOWN_COLUMN"
    } else if text.contains("syntax error") {
        "SYNTAX_ERROR"
    } else {
        "ENGINE_ERROR"
    }
}

impl BackendAdapter for SqliteAdapter {
    fn capabilities(&self) -> Capabilities {
        // Window functions arrived in SQLite 3.25.
        Capabilities {
            row_numbering: rusqlite::version_number() >= 3_025_000,
        }
    }

    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError> {
        let fail = |e: rusqlite::Error| BackendError::sql(error_code(&e), e.to_string(), sql);
        let mut stmt = self.conn.prepare(sql).map_err(fail)?;
        let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
        let width = columns.len();
        let mut rows = Vec::new();
        let mut it = stmt.query([]).map_err(fail)?;
        while let Some(row) = it.next().map_err(fail)? {
            let mut out = Vec::with_capacity(width);
            for i in 0..width {
                out.push(match row.get_ref(i).map_err(fail)? {
                    ValueRef::Null => Value::Null,
                    ValueRef::Integer(i) => Value::Int(i),
                    ValueRef::Real(r) => Value::Real(r),
                    ValueRef::Text(t) => Value::Text(String::from_utf8_lossy(t).into_owned()),
                    ValueRef::Blob(_) => {
                        return Err(BackendError::Shape(format!("column {} returned a blob", columns[i])))
                    }
                });
            }
            rows.push(out);
        }
        Ok(RowSet { columns, rows })
    }

    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError> {
        let load = |e: rusqlite::Error| BackendError::Load(format!("{}: {e}", data.schema.name));
        let name = quote_ident(&data.schema.name);
        let cols: Vec<String> = data
            .schema
            .columns
            .iter()
            .map(|c| {
                let t = match c.dtype {
                    DataType::Integer | DataType::Boolean => "INTEGER",
                    DataType::Real => "REAL",
                    DataType::Text => "TEXT",
                };
                format!("{} {t}", quote_ident(&c.name))
            })
            .collect();
        let tx = self.conn.transaction().map_err(load)?;
        tx.execute(&format!("DROP TABLE IF EXISTS {name}"), []).map_err(load)?;
        tx.execute(&format!("CREATE TABLE {name} ({})", cols.join(", ")), [])
            .map_err(load)?;
        {
            let marks = vec!["?"; cols.len()].join(", ");
            let mut ins = tx.prepare(&format!("INSERT INTO {name} VALUES ({marks})")).map_err(load)?;
            for r in &data.rows {
                let params: Vec<rusqlite::types::Value> = r
                    .iter()
                    .map(|v| match v {
                        Value::Null => rusqlite::types::Value::Null,
                        Value::Bool(b) => rusqlite::types::Value::Integer(i64::from(*b)),
                        Value::Int(i) => rusqlite::types::Value::Integer(*i),
                        Value::Real(x) => rusqlite::types::Value::Real(*x),
                        Value::Text(s) => rusqlite::types::Value::Text(s.clone()),
                    })
                    .collect();
                ins.execute(rusqlite::params_from_iter(params)).map_err(load)?;
            }
        }
        tx.commit().map_err(load)
    }
}
