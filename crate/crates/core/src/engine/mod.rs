//! The query pipeline: validate, charge, execute, deliver.

mod plan;

use std::collections::HashSet;
use std::fmt;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountantError, Admission, BudgetLedger, MechanismEvent};
use crate::backend::{
    connect, fetch_user_partition_moments, load_dataset, two_stage_bound, BackendAdapter, BackendError, TableData,
};
use crate::catalog::{AccountantKind, Catalog, EngineConfig, GlobalBudget, PrivacyPolicy};
use crate::mechanisms::{estimate, MechanismError};
use crate::sql::SyntaxError;
use crate::thresholding::apply_double_threshold;
use crate::validator::{check_sql, explain, OutputColumn, QueryPlanSummary, Rejection, ValidationError};
use crate::Value;

pub use plan::{plan_mechanisms, AggregateReport, MechanismReport, NoiseReport, ThresholdReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub sql: String,
    pub epsilon: f64,
    pub delta: f64,
    /// Fixes the noise draws; for tests and reproductions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl QueryRequest {
    pub fn new(sql: impl Into<String>, epsilon: f64, delta: f64) -> Self {
        QueryRequest {
            sql: sql.into(),
            epsilon,
            delta,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    fn check(&self) -> Result<(), EngineError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(EngineError::InvalidRequest("epsilon must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(EngineError::InvalidRequest("delta must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetRemaining {
    /// Global ε minus the ε already spent at the global δ.
    pub epsilon: f64,
    /// Global δ minus the δ consumed at the global ε.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    /// Released group keys and estimates, ordered by key.
    pub rows: Vec<Vec<Value>>,
    pub suppressed_groups: u64,
    pub mechanism_report: MechanismReport,
    pub budget_remaining: BudgetRemaining,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DryRunResult {
    pub admitted: bool,
    pub verdict: Admission,
    pub plan: String,
    pub mechanism_report: MechanismReport,
    pub budget_remaining: BudgetRemaining,
    /// What would remain after charging; equal to `budget_remaining` on denial.
    pub budget_after: BudgetRemaining,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetStatus {
    pub accountant: AccountantKind,
    pub epsilon_global: f64,
    pub delta_global: f64,
    pub events: usize,
    /// δ(ε_global) of everything charged so far.
    pub delta_consumed: f64,
    /// Smallest ε with δ(ε) ≤ δ_global; `None` when no finite ε fits.
    pub epsilon_spent: Option<f64>,
    pub remaining: BudgetRemaining,
    /// Label of the reference bundle: the last admitted query.
    pub reference_query: Option<String>,
    /// Further copies of the reference bundle the budget admits.
    pub reference_queries_remaining: Option<u64>,
}

impl fmt::Display for BudgetStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} events ({} accountant, global epsilon {}, delta {:e})",
            self.events,
            match self.accountant {
                AccountantKind::Pld => "pld",
                AccountantKind::Rdp => "rdp",
            },
            self.epsilon_global,
            self.delta_global
        )?;
        writeln!(f, "delta consumed at global epsilon: {:.4e}", self.delta_consumed)?;
        match self.epsilon_spent {
            Some(e) => writeln!(f, "epsilon spent at global delta: {e:.6}")?,
            None => writeln!(f, "epsilon spent at global delta: unbounded")?,
        }
        write!(
            f,
            "remaining: epsilon {:.6}, delta {:.4e}",
            self.remaining.epsilon, self.remaining.delta
        )?;
        if let (Some(q), Some(n)) = (&self.reference_query, self.reference_queries_remaining) {
            write!(f, "\nfurther copies of the last query: {n} ({q})")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Admitted,
    Denied,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub seq: u64,
    pub sql: String,
    pub epsilon: f64,
    pub delta: f64,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("{0}")]
    InvalidRequest(String),
    #[error("syntax error: {0}")]
    Syntax(SyntaxError),
    #[error("{}", join_errors(.0))]
    Validation(Vec<ValidationError>),
    #[error("budget exceeded: {reason}")]
    BudgetExceeded {
        reason: String,
        delta_after: f64,
        remaining: BudgetRemaining,
    },
    #[error("backend failure: {error}")]
    Backend { error: BackendError, charged: bool },
    #[error("internal error: {message}")]
    Internal { message: String, charged: bool },
}

fn join_errors(errors: &[ValidationError]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

impl From<Rejection> for EngineError {
    fn from(r: Rejection) -> Self {
        match r {
            Rejection::Syntax(e) => EngineError::Syntax(e),
            Rejection::Invalid(errors) => EngineError::Validation(errors),
        }
    }
}

impl EngineError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &str {
        match self {
            EngineError::InvalidRequest(_) => "INVALID_REQUEST",
            EngineError::Syntax(_) => "SYNTAX_ERROR",
            EngineError::Validation(errors) => errors.first().map_or("INVALID_QUERY", |e| e.code.as_str()),
            EngineError::BudgetExceeded { .. } => "BUDGET_EXCEEDED",
            EngineError::Backend { .. } => "BACKEND_ERROR",
            EngineError::Internal { .. } => "INTERNAL_ERROR",
        }
    }

    /// Pipeline stage that failed: 1 validation, 2 budget, 3 execution.
    pub fn stage(&self) -> u8 {
        match self {
            EngineError::InvalidRequest(_) | EngineError::Syntax(_) | EngineError::Validation(_) => 1,
            EngineError::BudgetExceeded { .. } => 2,
            EngineError::Backend { .. } | EngineError::Internal { .. } => 3,
        }
    }

    /// Whether the request's budget was charged before the failure.
    pub fn charged(&self) -> bool {
        matches!(
            self,
            EngineError::Backend { charged: true, .. } | EngineError::Internal { charged: true, .. }
        )
    }
}

/// Diagnostic overrides; the defaults are the production behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EngineOptions {
    /// Use this σ for every mechanism instead of calibrating.
    pub fixed_sigma: Option<f64>,
    /// Release every key meeting the exact k rule, skipping the noisy test.
    pub exact_threshold: bool,
}

pub struct Engine {
    catalog: Catalog,
    policy: PrivacyPolicy,
    ledger: BudgetLedger,
    options: EngineOptions,
    adapter: Mutex<Box<dyn BackendAdapter>>,
    history: Vec<HistoryEntry>,
    reference: Option<(String, Vec<MechanismEvent>)>,
    reference_cache: Mutex<Option<(usize, u64)>>,
}

impl Engine {
    pub fn new(catalog: Catalog, policy: PrivacyPolicy, budget: GlobalBudget, adapter: Box<dyn BackendAdapter>) -> Self {
        Engine {
            catalog,
            policy,
            ledger: BudgetLedger::new(budget),
            options: EngineOptions::default(),
            adapter: Mutex::new(adapter),
            history: Vec::new(),
            reference: None,
            reference_cache: Mutex::new(None),
        }
    }

    /// Connects to the configured backend (the in-memory engine by default).
    pub fn from_config(config: EngineConfig) -> Result<Self, BackendError> {
        let adapter = connect(config.backend.as_deref().unwrap_or("memory"))?;
        Ok(Engine::new(config.catalog, config.policy, config.budget, adapter))
    }

    pub fn with_options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn policy(&self) -> &PrivacyPolicy {
        &self.policy
    }

    pub fn ledger(&self) -> &BudgetLedger {
        &self.ledger
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn load_tables(&mut self, data: &[TableData]) -> Result<(), BackendError> {
        let adapter = self.adapter.get_mut().unwrap_or_else(|p| p.into_inner());
        load_dataset(adapter.as_mut(), &self.catalog, data)
    }

    /// Hands the backend back, e.g. to reuse loaded data in another engine.
    pub fn into_adapter(self) -> Box<dyn BackendAdapter> {
        self.adapter.into_inner().unwrap_or_else(|p| p.into_inner())
    }

    pub fn export_ledger(&self) -> String {
        self.ledger.export_json()
    }

    /// Appends the events of an exported ledger; returns how many.
    pub fn import_ledger(&mut self, text: &str) -> Result<usize, AccountantError> {
        let n = self.ledger.import_json(text)?;
        *self.reference_cache.lock().unwrap_or_else(|p| p.into_inner()) = None;
        Ok(n)
    }

    fn prepare(&self, request: &QueryRequest) -> Result<(QueryPlanSummary, MechanismReport), EngineError> {
        request.check()?;
        let summary = check_sql(&request.sql, &self.catalog)?;
        let report = plan_mechanisms(&summary, &self.policy, request.epsilon, request.delta, &self.options)?;
        Ok((summary, report))
    }

    fn remaining_of(ledger: &BudgetLedger) -> BudgetRemaining {
        let b = ledger.budget();
        BudgetRemaining {
            epsilon: (b.epsilon_global - ledger.epsilon_spent()).max(0.0),
            delta: (b.delta_global - ledger.delta_consumed()).max(0.0),
        }
    }

    pub fn budget_remaining(&self) -> BudgetRemaining {
        Engine::remaining_of(&self.ledger)
    }

    /// The admission verdict and noise parameters, without charging or
    /// touching the data.
    pub fn dry_run(&self, request: &QueryRequest) -> Result<DryRunResult, EngineError> {
        let (summary, report) = self.prepare(request)?;
        let events = report.events();
        let verdict = self.ledger.would_admit(&events).map_err(|e| EngineError::InvalidRequest(e.to_string()))?;
        let remaining = self.budget_remaining();
        let after = if verdict.is_admitted() {
            let mut hypothetical = self.ledger.clone();
            for e in events {
                hypothetical.compose(e);
            }
            Engine::remaining_of(&hypothetical)
        } else {
            remaining
        };
        Ok(DryRunResult {
            admitted: verdict.is_admitted(),
            verdict,
            plan: explain(&summary, &self.policy),
            mechanism_report: report,
            budget_remaining: remaining,
            budget_after: after,
        })
    }

    pub fn budget_status(&self) -> BudgetStatus {
        let b = self.ledger.budget();
        let spent = self.ledger.epsilon_spent();
        let reference_remaining = self.reference.as_ref().map(|(_, bundle)| {
            let mut cache = self.reference_cache.lock().unwrap_or_else(|p| p.into_inner());
            match *cache {
                Some((events, n)) if events == self.ledger.events().len() => n,
                _ => {
                    let n = self.ledger.max_additional_queries(bundle);
                    *cache = Some((self.ledger.events().len(), n));
                    n
                }
            }
        });
        BudgetStatus {
            accountant: b.accountant_kind,
            epsilon_global: b.epsilon_global,
            delta_global: b.delta_global,
            events: self.ledger.events().len(),
            delta_consumed: self.ledger.delta_consumed(),
            epsilon_spent: spent.is_finite().then_some(spent),
            remaining: self.budget_remaining(),
            reference_query: self.reference.as_ref().map(|(sql, _)| sql.clone()),
            reference_queries_remaining: reference_remaining,
        }
    }

    /// Runs the full pipeline. A request that fails validation or the budget
    /// check never reaches the backend.
    pub fn run_query(&mut self, request: &QueryRequest) -> Result<QueryResult, EngineError> {
        let result = self.run_inner(request);
        let (outcome, code) = match &result {
            Ok(_) => (Outcome::Admitted, None),
            Err(e) => (
                match e.stage() {
                    1 => Outcome::Rejected,
                    2 => Outcome::Denied,
                    _ => Outcome::Failed,
                },
                Some(e.code().to_string()),
            ),
        };
        self.history.push(HistoryEntry {
            seq: self.history.len() as u64 + 1,
            sql: request.sql.clone(),
            epsilon: request.epsilon,
            delta: request.delta,
            outcome,
            code,
            timestamp_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
        });
        result
    }

    fn run_inner(&mut self, request: &QueryRequest) -> Result<QueryResult, EngineError> {
        // Stage 1.
        let (summary, report) = self.prepare(request)?;
        // Stage 2.
        let events = report.events();
        let admission = self
            .ledger
            .check_and_charge(&events)
            .map_err(|e| EngineError::InvalidRequest(e.to_string()))?;
        if let Admission::Denied { reason, delta_after } = admission {
            return Err(EngineError::BudgetExceeded {
                reason,
                delta_after,
                remaining: self.budget_remaining(),
            });
        }
        self.reference = Some((request.sql.clone(), events));
        // Stage 3.
        let rows = {
            let adapter = self.adapter.get_mut().unwrap_or_else(|p| p.into_inner());
            fetch_user_partition_moments(adapter.as_mut(), &summary, &self.catalog, &self.policy)
                .map_err(|error| EngineError::Backend { error, charged: true })?
        };
        let mut rng = match request.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_rng(&mut rand::rng()),
        };
        let (columns, out_rows, suppressed) = release(&summary, &report, &self.policy, &rows, &mut rng)
            .map_err(|e| EngineError::Internal {
                message: e.to_string(),
                charged: true,
            })?;
        // Stage 4.
        Ok(QueryResult {
            columns,
            rows: out_rows,
            suppressed_groups: suppressed,
            mechanism_report: report,
            budget_remaining: self.budget_remaining(),
        })
    }
}

type Released = (Vec<String>, Vec<Vec<Value>>, u64);

fn release(
    summary: &QueryPlanSummary,
    report: &MechanismReport,
    policy: &PrivacyPolicy,
    rows: &[crate::backend::UserPartitionMoments],
    rng: &mut ChaCha20Rng,
) -> Result<Released, MechanismError> {
    let c_part = policy.max_partitions_per_user;
    let params = report.threshold_params(policy);
    let first = two_stage_bound(rows, &policy.hash_key, c_part, None);

    // Noisy user counts, one per candidate key, in key order.
    let mut noisy_counts = std::collections::BTreeMap::new();
    let survivors: HashSet<Vec<Value>> = match &report.threshold {
        Some(t) => {
            let spec = t.count.spec();
            let stats: Vec<_> = first
                .iter()
                .map(|p| {
                    let noisy = spec.privatize(p.exact_distinct_users as f64, rng);
                    noisy_counts.insert(p.key.clone(), noisy);
                    let mut s = p.stats();
                    s.noisy_count = Some(noisy);
                    s
                })
                .collect();
            let outcome = apply_double_threshold(&stats, &params);
            outcome.released.iter().map(|&i| stats[i].key.clone()).collect()
        }
        // A scalar query's only partition is public.
        None => first.partitions.keys().cloned().collect(),
    };

    let second = two_stage_bound(rows, &policy.hash_key, c_part, Some(&survivors));
    let candidates = if summary.group_keys.is_empty() { 1 } else { first.len() as u64 };
    let mut out = Vec::new();
    for p in second.iter() {
        if p.exact_distinct_users < u64::from(params.k) {
            continue;
        }
        let mut values = Vec::with_capacity(summary.aggregates.len());
        for (j, a) in report.aggregates.iter().enumerate() {
            let v = if a.reuses_threshold_count {
                noisy_counts[&p.key]
            } else {
                let specs: Vec<_> = a.noise.iter().map(NoiseReport::spec).collect();
                estimate(a.kind, &p.aggregates[j], &specs, rng)?.value
            };
            values.push(Value::Real(v));
        }
        out.push(
            summary
                .outputs
                .iter()
                .map(|o| match o {
                    OutputColumn::Key(i) => p.key[*i].clone(),
                    OutputColumn::Aggregate(j) => values[*j].clone(),
                })
                .collect(),
        );
    }
    let suppressed = candidates.saturating_sub(out.len() as u64);
    Ok((summary.output_names(), out, suppressed))
}
