//! JSON API under `/v1`, plus optional static files for the browser console.
//!
//! There is no authentication: the service trusts its network boundary.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::catalog::{PrivacyPolicy, TableSchema};
use crate::engine::{Engine, EngineError, QueryRequest};
use crate::validator::ValidationError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<ApiValidationError>,
    /// Set when a failure happened after the budget was charged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub charged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiValidationError {
    pub code: String,
    pub message: String,
    pub start: usize,
    pub end: usize,
}

impl From<&ValidationError> for ApiValidationError {
    fn from(e: &ValidationError) -> Self {
        ApiValidationError {
            code: e.code.as_str().to_string(),
            message: e.message.clone(),
            start: e.span.start,
            end: e.span.end,
        }
    }
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: 400,
            code: "INVALID_REQUEST".into(),
            message: message.into(),
            errors: Vec::new(),
            charged: false,
        }
    }
}

impl From<&EngineError> for ApiError {
    fn from(e: &EngineError) -> Self {
        let status = match e.stage() {
            1 => 400,
            2 => 402,
            _ => 500,
        };
        let errors = match e {
            EngineError::Validation(errors) => errors.iter().map(ApiValidationError::from).collect(),
            _ => Vec::new(),
        };
        ApiError {
            status,
            code: e.code().to_string(),
            message: e.to_string(),
            errors,
            charged: e.charged(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

/// Body of `POST /v1/query`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub sql: String,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub dry_run: bool,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemaSummary<'a> {
    pub tables: &'a [TableSchema],
    pub policy: &'a PrivacyPolicy,
}

/// Shared service state. Submissions take the write lock, so they run one
/// at a time; reads share the lock.
#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<RwLock<Engine>>,
    /// Where to write the ledger after every charge, if anywhere.
    pub ledger_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(engine: Engine) -> Self {
        AppState {
            engine: Arc::new(RwLock::new(engine)),
            ledger_path: None,
        }
    }

    pub fn with_ledger_path(mut self, path: PathBuf) -> Self {
        self.ledger_path = Some(path);
        self
    }
}

fn internal(message: impl Into<String>) -> ApiError {
    ApiError {
        status: 500,
        code: "INTERNAL_ERROR".into(),
        message: message.into(),
        errors: Vec::new(),
        charged: false,
    }
}

/// Runs blocking engine work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| internal(format!("worker failed: {e}")))?
}

fn persist(path: Option<&Path>, engine: &Engine) -> Result<(), ApiError> {
    if let Some(p) = path {
        std::fs::write(p, engine.export_ledger()).map_err(|e| internal(format!("writing ledger: {e}")))?;
    }
    Ok(())
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let body: QueryBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    let request = QueryRequest {
        sql: body.sql,
        epsilon: body.epsilon,
        delta: body.delta,
        seed: body.seed,
    };
    blocking(move || {
        if body.dry_run {
            let engine = state.engine.read().map_err(|_| internal("engine lock poisoned"))?;
            let out = engine.dry_run(&request).map_err(|e| ApiError::from(&e))?;
            return Ok(Json(out).into_response());
        }
        let mut engine = state.engine.write().map_err(|_| internal("engine lock poisoned"))?;
        let before = engine.ledger().events().len();
        let result = engine.run_query(&request);
        if engine.ledger().events().len() != before {
            persist(state.ledger_path.as_deref(), &engine)?;
        }
        match result {
            Ok(r) => Ok(Json(r).into_response()),
            Err(e) => Err(ApiError::from(&e)),
        }
    })
    .await
}

async fn budget(State(state): State<AppState>) -> Result<Response, ApiError> {
    blocking(move || {
        let engine = state.engine.read().map_err(|_| internal("engine lock poisoned"))?;
        Ok(Json(engine.budget_status()).into_response())
    })
    .await
}

async fn schema(State(state): State<AppState>) -> Result<Response, ApiError> {
    let engine = state.engine.read().map_err(|_| internal("engine lock poisoned"))?;
    Ok(Json(SchemaSummary {
        tables: engine.catalog().tables(),
        policy: engine.policy(),
    })
    .into_response())
}

async fn history(State(state): State<AppState>) -> Result<Response, ApiError> {
    let engine = state.engine.read().map_err(|_| internal("engine lock poisoned"))?;
    Ok(Json(engine.history()).into_response())
}

async fn ledger_export(State(state): State<AppState>) -> Result<Response, ApiError> {
    let engine = state.engine.read().map_err(|_| internal("engine lock poisoned"))?;
    Ok((
        [(axum::http::header::CONTENT_TYPE, "application/json")],
        engine.export_ledger(),
    )
        .into_response())
}

#[derive(Serialize)]
struct Imported {
    imported: usize,
    events: usize,
}

async fn ledger_import(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let text = String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    blocking(move || {
        let mut engine = state.engine.write().map_err(|_| internal("engine lock poisoned"))?;
        let imported = engine.import_ledger(&text).map_err(|e| ApiError {
            code: "INVALID_LEDGER".into(),
            ..ApiError::bad_request(e.to_string())
        })?;
        persist(state.ledger_path.as_deref(), &engine)?;
        Ok(Json(Imported {
            imported,
            events: engine.ledger().events().len(),
        })
        .into_response())
    })
    .await
}

/// The `/v1` routes; with `static_dir`, every other path is served from it.
pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/v1/query", post(query))
        .route("/v1/budget", get(budget))
        .route("/v1/schema", get(schema))
        .route("/v1/history", get(history))
        .route("/v1/ledger/export", post(ledger_export))
        .route("/v1/ledger/import", post(ledger_import))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir.as_deref()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
