//! Registered table schemas, privacy-unit designation, contribution caps and
//! the global budget, plus the JSON configuration document that carries them.
//!
//! A configuration document has the top-level keys `tables`, `policy`,
//! `budget` and the optional `backend` connection descriptor. Unknown keys
//! are rejected at every level. See `docs/config.md` for the full schema.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanisms::ClampBounds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Integer,
    Real,
    Text,
    Boolean,
}

impl DataType {
    pub fn is_numeric(self) -> bool {
        matches!(self, DataType::Integer | DataType::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub dtype: DataType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp: Option<ClampBounds>,
}

impl ColumnSpec {
    pub fn new(name: &str, dtype: DataType) -> Self {
        ColumnSpec {
            name: name.to_string(),
            dtype,
            clamp: None,
        }
    }

    pub fn clamped(name: &str, dtype: DataType, lo: f64, hi: f64) -> Self {
        ColumnSpec {
            name: name.to_string(),
            dtype,
            clamp: Some(ClampBounds { lo, hi }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForeignKey {
    pub column: String,
    pub references_table: String,
    pub references_column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy_unit: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableSchema {
    pub fn column(&self, name: &str) -> Option<&ColumnSpec> {
        self.columns.iter().find(|c| c.name == name)
    }

    fn check(&self) -> Result<(), CatalogError> {
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(CatalogError::DuplicateColumn {
                    table: self.name.clone(),
                    column: c.name.clone(),
                });
            }
            if let Some(b) = &c.clamp {
                if !c.dtype.is_numeric() {
                    return Err(CatalogError::InvalidColumn {
                        table: self.name.clone(),
                        column: c.name.clone(),
                        message: "clamp bounds are only allowed on numeric columns".into(),
                    });
                }
                b.check().map_err(|e| CatalogError::InvalidColumn {
                    table: self.name.clone(),
                    column: c.name.clone(),
                    message: e.to_string(),
                })?;
            }
        }
        if let Some(unit) = &self.privacy_unit {
            if self.column(unit).is_none() {
                return Err(CatalogError::MissingPrivacyUnitColumn {
                    table: self.name.clone(),
                    column: unit.clone(),
                });
            }
        }
        for fk in &self.foreign_keys {
            if self.column(&fk.column).is_none() {
                return Err(CatalogError::InvalidColumn {
                    table: self.name.clone(),
                    column: fk.column.clone(),
                    message: "foreign key names a missing column".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogError {
    #[error("table '{0}' is already registered")]
    DuplicateTable(String),
    #[error("table '{table}' declares column '{column}' twice")]
    DuplicateColumn { table: String, column: String },
    #[error("table '{table}': privacy unit '{column}' is not a column of the table")]
    MissingPrivacyUnitColumn { table: String, column: String },
    #[error("table '{table}', column '{column}': {message}")]
    InvalidColumn {
        table: String,
        column: String,
        message: String,
    },
    #[error("table '{table}': foreign key {column} references unknown {target}")]
    DanglingForeignKey {
        table: String,
        column: String,
        target: String,
    },
}

/// Immutable-after-load set of table schemas.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    tables: Vec<TableSchema>,
    index: HashMap<String, usize>,
}

/// Handle to a registered table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TableHandle(pub usize);

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_table(&mut self, schema: TableSchema) -> Result<TableHandle, CatalogError> {
        if self.index.contains_key(&schema.name) {
            return Err(CatalogError::DuplicateTable(schema.name));
        }
        schema.check()?;
        let handle = TableHandle(self.tables.len());
        self.index.insert(schema.name.clone(), handle.0);
        self.tables.push(schema);
        Ok(handle)
    }

    /// Checks that every foreign key points at a registered table and column.
    pub fn check_references(&self) -> Result<(), CatalogError> {
        for t in &self.tables {
            for fk in &t.foreign_keys {
                let ok = self
                    .table(&fk.references_table)
                    .is_some_and(|ft| ft.column(&fk.references_column).is_some());
                if !ok {
                    return Err(CatalogError::DanglingForeignKey {
                        table: t.name.clone(),
                        column: fk.column.clone(),
                        target: format!("{}.{}", fk.references_table, fk.references_column),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&TableSchema> {
        self.index.get(name).map(|&i| &self.tables[i])
    }

    pub fn get(&self, handle: TableHandle) -> &TableSchema {
        &self.tables[handle.0]
    }

    pub fn tables(&self) -> &[TableSchema] {
        &self.tables
    }

    /// Whether `a.col_a = b.col_b` follows a declared foreign key in either
    /// direction.
    pub fn is_foreign_key(&self, table_a: &str, col_a: &str, table_b: &str, col_b: &str) -> bool {
        let declared = |from: &str, fcol: &str, to: &str, tcol: &str| {
            self.table(from).is_some_and(|t| {
                t.foreign_keys
                    .iter()
                    .any(|fk| fk.column == fcol && fk.references_table == to && fk.references_column == tcol)
            })
        };
        declared(table_a, col_a, table_b, col_b) || declared(table_b, col_b, table_a, col_a)
    }

    /// Resolves, for every source of a query, the column that identifies the
    /// user owning each joined row.
    ///
    /// A source owns its rows directly when its table declares a privacy unit;
    /// otherwise ownership is inherited across a join edge that follows a
    /// declared foreign key to an already resolved source. Edges that are not
    /// declared foreign keys never propagate ownership.
    pub fn resolve_privacy_unit(
        &self,
        sources: &[SourceBinding],
        join_edges: &[JoinEdge],
    ) -> Result<Lineage, LineageError> {
        let mut owners: BTreeMap<String, UnitPath> = BTreeMap::new();
        let table_of: HashMap<&str, &str> = sources.iter().map(|s| (s.alias.as_str(), s.table.as_str())).collect();
        for s in sources {
            let schema = self
                .table(&s.table)
                .ok_or_else(|| LineageError::UnknownTable(s.table.clone()))?;
            if let Some(unit) = &schema.privacy_unit {
                owners.insert(
                    s.alias.clone(),
                    UnitPath {
                        owner: ColumnRef::new(&s.alias, unit),
                        via: Vec::new(),
                    },
                );
            }
        }
        let fk_edges: Vec<&JoinEdge> = join_edges
            .iter()
            .filter(|e| match (table_of.get(e.left.source.as_str()), table_of.get(e.right.source.as_str())) {
                (Some(lt), Some(rt)) => self.is_foreign_key(lt, &e.left.column, rt, &e.right.column),
                _ => false,
            })
            .collect();
        loop {
            let mut progressed = false;
            for edge in &fk_edges {
                for (from, to) in [(&edge.left, &edge.right), (&edge.right, &edge.left)] {
                    if owners.contains_key(&from.source) {
                        continue;
                    }
                    let Some(known) = owners.get(&to.source) else { continue };
                    let owner = if known.owner == *to {
                        from.clone()
                    } else {
                        known.owner.clone()
                    };
                    let mut via = known.via.clone();
                    via.push((*edge).clone());
                    owners.insert(from.source.clone(), UnitPath { owner, via });
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        let missing: Vec<String> = sources
            .iter()
            .filter(|s| !owners.contains_key(&s.alias))
            .map(|s| s.table.clone())
            .collect();
        if !missing.is_empty() {
            return Err(LineageError::Unreachable(missing));
        }

        // Every joined row must belong to exactly one user: all owner columns
        // have to be equated by the join edges.
        let mut uf = UnionFind::default();
        for e in join_edges {
            uf.union(&e.left, &e.right);
        }
        let mut roots = owners.values().map(|p| uf.find(&p.owner));
        if let Some(first) = roots.next() {
            if roots.any(|r| r != first) {
                return Err(LineageError::AmbiguousOwner);
            }
        }
        Ok(Lineage { owners })
    }
}

#[derive(Default)]
struct UnionFind {
    parent: HashMap<ColumnRef, ColumnRef>,
}

impl UnionFind {
    fn find(&mut self, c: &ColumnRef) -> ColumnRef {
        let p = self.parent.get(c).cloned();
        match p {
            None => c.clone(),
            Some(p) if p == *c => p,
            Some(p) => {
                let root = self.find(&p);
                self.parent.insert(c.clone(), root.clone());
                root
            }
        }
    }

    fn union(&mut self, a: &ColumnRef, b: &ColumnRef) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent.insert(ra, rb);
        }
    }
}

/// A table occurrence in a query, under the name it is referenced by.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SourceBinding {
    pub alias: String,
    pub table: String,
}

impl SourceBinding {
    pub fn new(alias: &str, table: &str) -> Self {
        SourceBinding {
            alias: alias.to_string(),
            table: table.to_string(),
        }
    }
}

/// A column of a specific query source.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ColumnRef {
    pub source: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(source: &str, column: &str) -> Self {
        ColumnRef {
            source: source.to_string(),
            column: column.to_string(),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.source, self.column)
    }
}

/// Equi-join predicate `left = right`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct JoinEdge {
    pub left: ColumnRef,
    pub right: ColumnRef,
}

impl fmt::Display for JoinEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {}", self.left, self.right)
    }
}

/// How one source's rows are attributed to a user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitPath {
    /// Column (visible in the joined row) holding the owning user.
    pub owner: ColumnRef,
    /// Join edges crossed to reach a source with a privacy unit; empty for
    /// identity lineage.
    pub via: Vec<JoinEdge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lineage {
    pub owners: BTreeMap<String, UnitPath>,
}

impl Lineage {
    /// Owner column for rows of the joined relation.
    pub fn owner_column(&self, first_source: &str) -> Option<&ColumnRef> {
        self.owners.get(first_source).map(|p| &p.owner)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LineageError {
    #[error("unknown table '{0}'")]
    UnknownTable(String),
    #[error("no privacy unit reachable for table(s) {}", .0.join(", "))]
    Unreachable(Vec<String>),
    #[error("joined rows would belong to more than one privacy unit")]
    AmbiguousOwner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSplit {
    /// Share of a query's epsilon spent on the thresholding count.
    pub f_count: f64,
    /// Share of a query's epsilon spent on the aggregates.
    pub f_agg: f64,
    /// Share of a query's delta given to the Gaussian mechanisms; the rest
    /// bounds the thresholding failure probability.
    pub delta_noise_frac: f64,
}

impl Default for BudgetSplit {
    fn default() -> Self {
        BudgetSplit {
            f_count: 0.3,
            f_agg: 0.7,
            delta_noise_frac: 0.5,
        }
    }
}

/// How an aggregate's budget is divided among its noisy quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightStrategy {
    #[default]
    Optimized,
    Uniform,
}

fn default_granularity_exponent() -> i32 {
    30
}

fn default_hash_key() -> String {
    "dpsql-stage-b".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyPolicy {
    /// Minimum number of distinct users in a released group.
    pub k_min: u32,
    pub max_partitions_per_user: u32,
    pub max_rows_per_user_per_partition: u32,
    pub max_distinct_values_per_user: u32,
    #[serde(default)]
    pub budget_split: BudgetSplit,
    #[serde(default)]
    pub estimator_weights: WeightStrategy,
    /// Noise is emitted on a grid of `2^-e` times the per-partition
    /// sensitivity, rounded down to a power of two.
    #[serde(default = "default_granularity_exponent")]
    pub granularity_exponent: i32,
    /// Key for the hash that orders a user's partitions when capping them.
    #[serde(default = "default_hash_key")]
    pub hash_key: String,
}

impl Default for PrivacyPolicy {
    fn default() -> Self {
        PrivacyPolicy {
            k_min: 1,
            max_partitions_per_user: 1,
            max_rows_per_user_per_partition: 1,
            max_distinct_values_per_user: 1,
            budget_split: BudgetSplit::default(),
            estimator_weights: WeightStrategy::default(),
            granularity_exponent: default_granularity_exponent(),
            hash_key: default_hash_key(),
        }
    }
}

impl PrivacyPolicy {
    pub fn caps(&self) -> crate::mechanisms::ContributionCaps {
        crate::mechanisms::ContributionCaps {
            rows_per_partition: self.max_rows_per_user_per_partition,
            partitions: self.max_partitions_per_user,
            distinct_values: self.max_distinct_values_per_user,
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let err = |path: &str, message: String| ConfigError::Invalid {
            path: format!("policy.{path}"),
            message,
        };
        if self.k_min < 1 {
            return Err(err("k_min", "k_min must be ≥ 1".into()));
        }
        for (name, v) in [
            ("max_partitions_per_user", self.max_partitions_per_user),
            ("max_rows_per_user_per_partition", self.max_rows_per_user_per_partition),
            ("max_distinct_values_per_user", self.max_distinct_values_per_user),
        ] {
            if v < 1 {
                return Err(err(name, format!("{name} must be ≥ 1")));
            }
        }
        let s = &self.budget_split;
        for (name, v) in [("f_count", s.f_count), ("f_agg", s.f_agg), ("delta_noise_frac", s.delta_noise_frac)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(err(&format!("budget_split.{name}"), format!("{name} must lie in (0, 1) (got {v})")));
            }
        }
        if (s.f_count + s.f_agg - 1.0).abs() > 1e-9 {
            return Err(err(
                "budget_split",
                format!(
                    "f_count + f_agg must equal 1 (got f_count = {}, f_agg = {}, sum = {})",
                    s.f_count,
                    s.f_agg,
                    s.f_count + s.f_agg
                ),
            ));
        }
        if !(1..=60).contains(&self.granularity_exponent) {
            return Err(err("granularity_exponent", "granularity_exponent must lie in 1..=60".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccountantKind {
    Rdp,
    #[default]
    Pld,
}

fn default_pld_spacing() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalBudget {
    pub epsilon_global: f64,
    pub delta_global: f64,
    #[serde(default, rename = "accountant")]
    pub accountant_kind: AccountantKind,
    /// Grid spacing of the privacy-loss histogram, in nats.
    #[serde(default = "default_pld_spacing")]
    pub pld_grid_spacing: f64,
}

impl GlobalBudget {
    pub fn new(epsilon_global: f64, delta_global: f64, accountant_kind: AccountantKind) -> Self {
        GlobalBudget {
            epsilon_global,
            delta_global,
            accountant_kind,
            pld_grid_spacing: default_pld_spacing(),
        }
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let err = |path: &str, message: &str| ConfigError::Invalid {
            path: format!("budget.{path}"),
            message: message.to_string(),
        };
        if !(self.epsilon_global > 0.0 && self.epsilon_global.is_finite()) {
            return Err(err("epsilon_global", "epsilon_global must be a positive finite number"));
        }
        if !(0.0..1.0).contains(&self.delta_global) {
            return Err(err("delta_global", "delta_global must lie in [0, 1)"));
        }
        if !(self.pld_grid_spacing > 0.0 && self.pld_grid_spacing <= 0.1) {
            return Err(err("pld_grid_spacing", "pld_grid_spacing must lie in (0, 0.1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

/// A fully validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub catalog: Catalog,
    pub policy: PrivacyPolicy,
    pub budget: GlobalBudget,
    /// Opaque backend connection descriptor.
    pub backend: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    tables: Vec<TableSchema>,
    policy: PrivacyPolicy,
    budget: GlobalBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backend: Option<String>,
}

/// Parses and validates a JSON configuration document.
pub fn load_config(text: &str) -> Result<EngineConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ConfigDocument = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
        path: match e.path().to_string() {
            p if p == "." => "$".to_string(),
            p => p,
        },
        message: e.inner().to_string(),
    })?;
    let mut catalog = Catalog::new();
    for (i, t) in doc.tables.into_iter().enumerate() {
        catalog.register_table(t).map_err(|e| ConfigError::Invalid {
            path: format!("tables[{i}]"),
            message: e.to_string(),
        })?;
    }
    catalog.check_references().map_err(|e| ConfigError::Invalid {
        path: "tables".into(),
        message: e.to_string(),
    })?;
    doc.policy.check()?;
    doc.budget.check()?;
    Ok(EngineConfig {
        catalog,
        policy: doc.policy,
        budget: doc.budget,
        backend: doc.backend,
    })
}

impl EngineConfig {
    pub fn new(catalog: Catalog, policy: PrivacyPolicy, budget: GlobalBudget) -> Self {
        EngineConfig {
            catalog,
            policy,
            budget,
            backend: None,
        }
    }

    /// Serializes back to the JSON document format accepted by
    /// [`load_config`].
    pub fn to_json(&self) -> String {
        let doc = ConfigDocument {
            tables: self.catalog.tables.clone(),
            policy: self.policy.clone(),
            budget: self.budget,
            backend: self.backend.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("config serializes")
    }
}
