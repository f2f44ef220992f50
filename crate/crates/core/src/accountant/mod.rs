//! Privacy-loss accounting across queries: an append-only ledger of
//! mechanism events composed under Rényi DP or privacy-loss distributions.

mod pld;
mod rdp;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{AccountantKind, GlobalBudget};
use crate::mechanisms::gaussian_delta;

pub use pld::{PldHistogram, LOSS_CAP};
pub use rdp::{default_alphas, rdp_of_gaussian, RdpCurve};

pub const LEDGER_FORMAT: &str = "dpsql-ledger/v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccountantError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("ledger import failed: {0}")]
    Import(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    #[default]
    Gaussian,
}

/// One charged mechanism invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismEvent {
    #[serde(default)]
    pub kind: EventKind,
    pub sigma: f64,
    pub delta_sensitivity: f64,
    /// Additive failure probability, e.g. from thresholding.
    #[serde(default)]
    pub delta_infinity: f64,
    #[serde(default)]
    pub label: String,
}

impl MechanismEvent {
    pub fn gaussian(sigma: f64, delta_sensitivity: f64, label: impl Into<String>) -> Self {
        MechanismEvent {
            kind: EventKind::Gaussian,
            sigma,
            delta_sensitivity,
            delta_infinity: 0.0,
            label: label.into(),
        }
    }

    pub fn with_delta_infinity(mut self, d: f64) -> Self {
        self.delta_infinity = d;
        self
    }

    pub fn check(&self) -> Result<(), AccountantError> {
        let ok = self.sigma > 0.0
            && self.sigma.is_finite()
            && self.delta_sensitivity > 0.0
            && self.delta_sensitivity.is_finite()
            && (0.0..1.0).contains(&self.delta_infinity);
        if ok {
            Ok(())
        } else {
            Err(AccountantError::InvalidArgument(format!(
                "invalid mechanism event (sigma = {}, delta_sensitivity = {}, delta_infinity = {})",
                self.sigma, self.delta_sensitivity, self.delta_infinity
            )))
        }
    }
}

/// Composed privacy loss of a sequence of events, without the additive
/// `δ∞` terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "accountant", rename_all = "lowercase")]
pub enum ComposedState {
    Rdp(RdpCurve),
    Pld(PldHistogram),
}

impl ComposedState {
    pub fn empty(kind: AccountantKind, grid_spacing: f64) -> Self {
        match kind {
            AccountantKind::Rdp => ComposedState::Rdp(RdpCurve::empty(default_alphas())),
            AccountantKind::Pld => ComposedState::Pld(PldHistogram::identity(grid_spacing)),
        }
    }

    fn of_event(kind: AccountantKind, grid_spacing: f64, e: &MechanismEvent) -> Self {
        match kind {
            AccountantKind::Rdp => {
                let mut c = RdpCurve::empty(default_alphas());
                c.add_gaussian(e.sigma, e.delta_sensitivity, 1.0);
                ComposedState::Rdp(c)
            }
            AccountantKind::Pld => ComposedState::Pld(PldHistogram::gaussian(e.sigma, e.delta_sensitivity, grid_spacing)),
        }
    }

    pub fn compose(&self, other: &ComposedState) -> ComposedState {
        match (self, other) {
            (ComposedState::Rdp(a), ComposedState::Rdp(b)) => {
                let mut c = a.clone();
                c.add(b);
                ComposedState::Rdp(c)
            }
            (ComposedState::Pld(a), ComposedState::Pld(b)) => ComposedState::Pld(a.compose(b)),
            _ => panic!("cannot compose states of different accountants"),
        }
    }

    pub fn self_compose(&self, m: u64) -> ComposedState {
        match self {
            ComposedState::Rdp(c) => ComposedState::Rdp(c.scaled(m as f64)),
            ComposedState::Pld(p) => ComposedState::Pld(p.self_compose(m)),
        }
    }

    pub fn delta_at(&self, epsilon: f64) -> f64 {
        match self {
            ComposedState::Rdp(c) => c.delta_at(epsilon),
            ComposedState::Pld(p) => p.delta_at(epsilon),
        }
    }
}

/// A query's events composed together, with their total `δ∞`.
#[derive(Debug, Clone)]
struct Bundle {
    state: ComposedState,
    delta_infinity: f64,
}

impl Bundle {
    fn of(kind: AccountantKind, grid_spacing: f64, events: &[MechanismEvent]) -> Bundle {
        let mut state = ComposedState::empty(kind, grid_spacing);
        let mut delta_infinity = 0.0;
        for e in events {
            state = state.compose(&ComposedState::of_event(kind, grid_spacing, e));
            delta_infinity += e.delta_infinity;
        }
        Bundle { state, delta_infinity }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Admission {
    Admitted { delta_after: f64 },
    Denied { delta_after: f64, reason: String },
}

impl Admission {
    pub fn is_admitted(&self) -> bool {
        matches!(self, Admission::Admitted { .. })
    }

    pub fn delta_after(&self) -> f64 {
        match self {
            Admission::Admitted { delta_after } | Admission::Denied { delta_after, .. } => *delta_after,
        }
    }
}

/// Append-only record of charged events and their composition.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    budget: GlobalBudget,
    events: Vec<MechanismEvent>,
    state: ComposedState,
    delta_infinity: f64,
    /// Largest `δ(ε_global)` over all event prefixes. Every prefix bound is
    /// also a bound for the whole sequence, so reporting the maximum stays
    /// sound and hides convolution round-off that could otherwise make the
    /// consumed budget appear to shrink.
    high_water: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LedgerDocument {
    format: String,
    accountant: AccountantKind,
    pld_grid_spacing: f64,
    events: Vec<MechanismEvent>,
}

impl BudgetLedger {
    pub fn new(budget: GlobalBudget) -> Self {
        BudgetLedger {
            budget,
            events: Vec::new(),
            state: ComposedState::empty(budget.accountant_kind, budget.pld_grid_spacing),
            delta_infinity: 0.0,
            high_water: 0.0,
        }
    }

    pub fn budget(&self) -> &GlobalBudget {
        &self.budget
    }

    pub fn events(&self) -> &[MechanismEvent] {
        &self.events
    }

    pub fn state(&self) -> &ComposedState {
        &self.state
    }

    fn kind(&self) -> AccountantKind {
        self.budget.accountant_kind
    }

    fn spacing(&self) -> f64 {
        self.budget.pld_grid_spacing
    }

    /// Appends one event unconditionally.
    pub fn compose(&mut self, event: MechanismEvent) {
        let (state, dinf, high) = self.with_bundle(std::slice::from_ref(&event));
        self.state = state;
        self.delta_infinity = dinf;
        self.high_water = high;
        self.events.push(event);
    }

    pub fn delta_at_epsilon(&self, epsilon: f64) -> f64 {
        if self.events.is_empty() {
            return 0.0;
        }
        let d = (self.state.delta_at(epsilon) + self.delta_infinity).min(1.0);
        if epsilon == self.budget.epsilon_global {
            d.max(self.high_water)
        } else {
            d
        }
    }

    /// `δ` already consumed at the global `ε`.
    pub fn delta_consumed(&self) -> f64 {
        self.delta_at_epsilon(self.budget.epsilon_global)
    }

    /// Smallest `ε` whose `δ(ε)` fits the global `δ`; infinite if none.
    pub fn epsilon_spent(&self) -> f64 {
        epsilon_for_delta(|e| self.delta_at_epsilon(e), self.budget.delta_global)
    }

    /// State, `δ∞` and high-water mark after appending `bundle`.
    fn with_bundle(&self, bundle: &[MechanismEvent]) -> (ComposedState, f64, f64) {
        let mut state = self.state.clone();
        let mut dinf = self.delta_infinity;
        let mut high = self.high_water;
        for e in bundle {
            state = state.compose(&ComposedState::of_event(self.kind(), self.spacing(), e));
            dinf += e.delta_infinity;
            high = high.max((state.delta_at(self.budget.epsilon_global) + dinf).min(1.0));
        }
        (state, dinf, high)
    }

    /// Composition after `bundle`, or the `δ(ε_global)` that rules it out.
    ///
    /// A single Gaussian whose exact `δ(ε_global)` already exceeds the
    /// budget is refused without building the composition: composing more
    /// mechanisms never lowers `δ(ε)`, and a low-noise event has a very wide
    /// loss distribution.
    fn evaluate(&self, bundle: &[MechanismEvent]) -> Result<Result<(ComposedState, f64, f64), f64>, AccountantError> {
        for e in bundle {
            e.check()?;
        }
        let eps = self.budget.epsilon_global;
        let lower = bundle
            .iter()
            .map(|e| gaussian_delta(eps, e.sigma, e.delta_sensitivity))
            .fold(self.high_water, f64::max);
        if lower > self.budget.delta_global {
            return Ok(Err(lower));
        }
        let (state, dinf, high) = self.with_bundle(bundle);
        Ok(if high <= self.budget.delta_global {
            Ok((state, dinf, high))
        } else {
            Err(high)
        })
    }

    fn denial(&self, delta_after: f64) -> Admission {
        Admission::Denied {
            delta_after,
            reason: format!(
                "charging would raise delta at epsilon {} to {:.3e}, above the global delta {:.3e}",
                self.budget.epsilon_global, delta_after, self.budget.delta_global
            ),
        }
    }

    /// The verdict `check_and_charge` would return, without charging.
    pub fn would_admit(&self, bundle: &[MechanismEvent]) -> Result<Admission, AccountantError> {
        Ok(match self.evaluate(bundle)? {
            Ok((_, _, delta_after)) => Admission::Admitted { delta_after },
            Err(delta_after) => self.denial(delta_after),
        })
    }

    /// Admits and appends the whole bundle, or nothing.
    pub fn check_and_charge(&mut self, bundle: &[MechanismEvent]) -> Result<Admission, AccountantError> {
        let (state, dinf, delta_after) = match self.evaluate(bundle)? {
            Ok(next) => next,
            Err(delta_after) => return Ok(self.denial(delta_after)),
        };
        self.state = state;
        self.delta_infinity = dinf;
        self.high_water = delta_after;
        self.events.extend(bundle.iter().cloned());
        Ok(Admission::Admitted { delta_after })
    }

    /// Composition state rebuilt from the event list.
    pub fn recompose(&self) -> BudgetLedger {
        let mut fresh = BudgetLedger::new(self.budget);
        for e in &self.events {
            fresh.compose(e.clone());
        }
        fresh
    }

    /// How many more copies of `bundle` the remaining budget admits.
    ///
    /// Searches over binary powers of the bundle: each candidate costs one
    /// composition with a cached power, instead of a fresh self-composition.
    pub fn max_additional_queries(&self, bundle: &[MechanismEvent]) -> u64 {
        const LIMIT: u32 = 40;
        let per = Bundle::of(self.kind(), self.spacing(), bundle);
        let eps = self.budget.epsilon_global;
        let fits = |state: &ComposedState, m: u64| {
            let d = state.delta_at(eps) + self.delta_infinity + m as f64 * per.delta_infinity;
            d.min(1.0).max(self.high_water) <= self.budget.delta_global
        };
        let mut powers = vec![per.state];
        // Counts above the closed-form bound cannot fit, and every power
        // below it is needed.
        let hint = self.gaussian_upper_bound(bundle);
        let possible = |m: u64| hint.is_none_or(|h| m <= h);
        if let Some(hint) = hint {
            while (2u64 << (powers.len() - 1)) <= hint && powers.len() as u32 <= LIMIT {
                let last = powers.last().expect("nonempty");
                powers.push(last.compose(last));
            }
            while powers.len() > 1 && !fits(&self.state.compose(powers.last().expect("nonempty")), 1 << (powers.len() - 1)) {
                powers.pop();
            }
        }
        let mut cur = self.state.compose(&powers[powers.len() - 1]);
        if !fits(&cur, 1 << (powers.len() - 1)) {
            return 0;
        }
        loop {
            let j = powers.len() - 1;
            if j as u32 >= LIMIT {
                return 1 << LIMIT;
            }
            if !possible(1 << (j + 1)) {
                break;
            }
            let next = powers[j].compose(&powers[j]);
            let candidate = self.state.compose(&next);
            if !fits(&candidate, 1 << (j + 1)) {
                break;
            }
            powers.push(next);
            cur = candidate;
        }
        let top = powers.len() - 1;
        let mut count = 1u64 << top;
        for i in (0..top).rev() {
            if !possible(count + (1 << i)) {
                continue;
            }
            let candidate = cur.compose(&powers[i]);
            if fits(&candidate, count + (1 << i)) {
                cur = candidate;
                count += 1 << i;
            }
        }
        count
    }

    /// Copies of `bundle` that fit when every Gaussian is composed exactly,
    /// which bounds the discretized count from above. `None` for RDP, whose
    /// searches are cheap anyway.
    fn gaussian_upper_bound(&self, bundle: &[MechanismEvent]) -> Option<u64> {
        if self.kind() != AccountantKind::Pld {
            return None;
        }
        let mu2 = |events: &[MechanismEvent]| -> f64 {
            events.iter().map(|e| (e.delta_sensitivity / e.sigma).powi(2)).sum()
        };
        let (base, per) = (mu2(&self.events), mu2(bundle));
        let dinf: f64 = bundle.iter().map(|e| e.delta_infinity).sum();
        let eps = self.budget.epsilon_global;
        let fits = |m: u64| {
            let mu = (base + m as f64 * per).sqrt();
            let d = if mu > 0.0 { gaussian_delta(eps, 1.0, mu) } else { 0.0 };
            d + self.delta_infinity + m as f64 * dinf <= self.budget.delta_global
        };
        if !fits(0) || per <= 0.0 {
            return None;
        }
        let mut hi = 1u64;
        while fits(hi) {
            if hi >= 1 << 40 {
                return None;
            }
            hi *= 2;
        }
        let mut lo = hi / 2;
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if fits(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // A little slack for round-off in the closed form.
        Some(lo + 1)
    }

    pub fn export_json(&self) -> String {
        let doc = LedgerDocument {
            format: LEDGER_FORMAT.to_string(),
            accountant: self.kind(),
            pld_grid_spacing: self.spacing(),
            events: self.events.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("ledger serializes")
    }

    /// Appends the events of an exported ledger. Importing never lowers the
    /// consumed budget.
    pub fn import_json(&mut self, text: &str) -> Result<usize, AccountantError> {
        let doc: LedgerDocument = serde_json::from_str(text).map_err(|e| AccountantError::Import(e.to_string()))?;
        if doc.format != LEDGER_FORMAT {
            return Err(AccountantError::Import(format!(
                "unsupported format '{}' (expected '{LEDGER_FORMAT}')",
                doc.format
            )));
        }
        for e in &doc.events {
            e.check().map_err(|e| AccountantError::Import(e.to_string()))?;
        }
        let n = doc.events.len();
        for e in doc.events {
            self.compose(e);
        }
        Ok(n)
    }
}

fn epsilon_for_delta(delta_at: impl Fn(f64) -> f64, delta: f64) -> f64 {
    if delta_at(0.0) <= delta {
        return 0.0;
    }
    let mut hi = 1.0;
    while delta_at(hi) > delta {
        hi *= 2.0;
        if hi > 1e6 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if delta_at(mid) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo < 1e-9 * hi {
            break;
        }
    }
    hi
}

/// Largest `m` such that `m` copies of `per_query` compose within `budget`.
pub fn max_admissible_queries(per_query: &[MechanismEvent], budget: &GlobalBudget) -> u64 {
    BudgetLedger::new(*budget).max_additional_queries(per_query)
}
