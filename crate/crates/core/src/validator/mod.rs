//! Static enforcement of the differentially private SQL subset.
//!
//! Accepted statements have the shape
//!
//! ```sql
//! [WITH name AS (SELECT cols FROM t [JOIN u ON fk = pk]... [WHERE p]), ...]
//! SELECT [key, ...] agg(args), ...
//! FROM t [JOIN u ON fk = pk]...
//! [WHERE p]
//! [GROUP BY key, ...]
//! ```
//!
//! where every join follows a declared foreign key and `agg` is one of
//! `COUNT`, `COUNT(DISTINCT ·)`, `SUM`, `AVG`, `VAR`, `STDDEV` and `COVAR`.
//! CTEs are expanded in place, so the plan always refers to base tables.

mod explain;
mod scope;

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::catalog::{Catalog, ColumnRef, DataType, JoinEdge, Lineage, SourceBinding};
use crate::mechanisms::{AggregateKind, ClampBounds};
use crate::sql::{parse_sql, BinaryOp, Expr, ExprKind, FunctionArgs, Query, SelectItem, SetExpr, Span, SyntaxError};

pub use explain::explain;
pub(crate) use scope::map_columns;
use scope::{contains_aggregate, contains_subquery, contains_window, Resolved, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    NonAggregateOutput,
    NestedSubquery,
    UnsupportedAggregate,
    MissingPrivacyUnit,
    UnknownColumn,
    UnknownTable,
    MissingClampBounds,
    UnsupportedSyntax,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NonAggregateOutput => "NON_AGGREGATE_OUTPUT",
            ErrorCode::NestedSubquery => "NESTED_SUBQUERY",
            ErrorCode::UnsupportedAggregate => "UNSUPPORTED_AGGREGATE",
            ErrorCode::MissingPrivacyUnit => "MISSING_PRIVACY_UNIT",
            ErrorCode::UnknownColumn => "UNKNOWN_COLUMN",
            ErrorCode::UnknownTable => "UNKNOWN_TABLE",
            ErrorCode::MissingClampBounds => "MISSING_CLAMP_BOUNDS",
            ErrorCode::UnsupportedSyntax => "UNSUPPORTED_SYNTAX",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationError {
    pub code: ErrorCode,
    pub message: String,
    pub span: Span,
}

impl ValidationError {
    pub(crate) fn new(code: ErrorCode, message: impl Into<String>, span: Span) -> Self {
        ValidationError {
            code,
            message: message.into(),
            span,
        }
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}..{}: {}", self.code, self.span.start, self.span.end, self.message)
    }
}

/// Why a SQL text was not accepted.
#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    Syntax(SyntaxError),
    Invalid(Vec<ValidationError>),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Syntax(e) => write!(f, "{e}"),
            Rejection::Invalid(errors) => {
                for (i, e) in errors.iter().enumerate() {
                    if i > 0 {
                        writeln!(f)?;
                    }
                    write!(f, "{e}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateSpec {
    pub kind: AggregateKind,
    /// Arguments over base-table columns (empty for `COUNT(*)`).
    #[serde(serialize_with = "exprs_as_sql")]
    pub args: Vec<Expr>,
    /// Clamp interval of each numeric argument.
    pub bounds: Vec<ClampBounds>,
    pub alias: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupKey {
    pub column: ColumnRef,
    pub name: String,
    pub dtype: DataType,
}

/// One output column in select-list order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "type", content = "index", rename_all = "lowercase")]
pub enum OutputColumn {
    Key(usize),
    Aggregate(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryPlanSummary {
    pub aggregates: Vec<AggregateSpec>,
    pub group_keys: Vec<GroupKey>,
    pub sources: Vec<SourceBinding>,
    pub join_edges: Vec<JoinEdge>,
    /// Conjunction of all WHERE predicates, including those of expanded CTEs.
    #[serde(serialize_with = "expr_as_sql")]
    pub row_filter: Option<Expr>,
    pub unit_lineage: Lineage,
    /// Column of the joined relation that identifies the owning user.
    pub owner: ColumnRef,
    pub outputs: Vec<OutputColumn>,
}

impl QueryPlanSummary {
    pub fn output_names(&self) -> Vec<String> {
        self.outputs
            .iter()
            .map(|o| match o {
                OutputColumn::Key(i) => self.group_keys[*i].name.clone(),
                OutputColumn::Aggregate(i) => self.aggregates[*i].alias.clone(),
            })
            .collect()
    }
}

fn exprs_as_sql<S: serde::Serializer>(v: &[Expr], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter().map(|e| e.to_string()))
}

fn expr_as_sql<S: serde::Serializer>(v: &Option<Expr>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(e) => s.serialize_some(&e.to_string()),
        None => s.serialize_none(),
    }
}

/// Parses and validates in one step.
pub fn check_sql(text: &str, catalog: &Catalog) -> Result<QueryPlanSummary, Rejection> {
    let ast = parse_sql(text).map_err(Rejection::Syntax)?;
    validate(&ast, catalog).map_err(Rejection::Invalid)
}

const SCALAR_FUNCTIONS: &[&str] = &[
    "ABS", "CEIL", "CEILING", "COALESCE", "EXP", "FLOOR", "IFNULL", "LENGTH", "LN", "LOG", "LOWER", "NULLIF",
    "POWER", "ROUND", "SIGN", "SQRT", "SUBSTR", "SUBSTRING", "TRIM", "UPPER",
];

fn aggregate_kind(name: &str, distinct: bool) -> Option<AggregateKind> {
    Some(match name {
        "COUNT" if distinct => AggregateKind::CountDistinct,
        "COUNT" => AggregateKind::Count,
        "SUM" => AggregateKind::Sum,
        "AVG" => AggregateKind::Avg,
        "VAR" | "VARIANCE" | "VAR_POP" => AggregateKind::Var,
        "STDDEV" | "STDDEV_POP" => AggregateKind::Stddev,
        "COVAR" | "COVAR_POP" => AggregateKind::Covar,
        _ => return None,
    })
}

pub(crate) fn is_supported_aggregate(name: &str) -> bool {
    aggregate_kind(name, false).is_some()
}

pub(crate) fn is_scalar_function(name: &str) -> bool {
    SCALAR_FUNCTIONS.contains(&name)
}

/// Checks every rule and returns all violations found.
pub fn validate(ast: &Query, catalog: &Catalog) -> Result<QueryPlanSummary, Vec<ValidationError>> {
    let mut errors = Vec::new();
    for o in &ast.order_by {
        errors.push(ValidationError::new(
            ErrorCode::UnsupportedSyntax,
            "ORDER BY is not supported",
            o.expr.span,
        ));
    }
    if let Some(l) = &ast.limit {
        errors.push(ValidationError::new(ErrorCode::UnsupportedSyntax, "LIMIT is not supported", l.span));
    }
    let select = match &ast.body {
        SetExpr::Select(s) => s,
        SetExpr::SetOperation { span, .. } => {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "set operations (UNION, INTERSECT, EXCEPT) are not supported",
                *span,
            ));
            return Err(errors);
        }
    };
    if select.distinct {
        errors.push(ValidationError::new(
            ErrorCode::UnsupportedSyntax,
            "SELECT DISTINCT is not supported",
            select.span,
        ));
    }
    if let Some(h) = &select.having {
        errors.push(ValidationError::new(ErrorCode::UnsupportedSyntax, "HAVING is not supported", h.span));
    }

    let ctes: Vec<(&str, &Query)> = ast.ctes.iter().map(|c| (c.name.as_str(), c.query.as_ref())).collect();
    let mut seen = HashSet::new();
    for c in &ast.ctes {
        if !seen.insert(c.name.as_str()) {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                format!("CTE '{}' is defined more than once", c.name),
                c.span,
            ));
        }
    }
    let scope = Scope::build(select, "", &ctes, catalog, &mut errors);

    // Group keys.
    let mut group_keys: Vec<GroupKey> = Vec::new();
    for g in &select.group_by {
        let ExprKind::Column { qualifier, name } = &g.kind else {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "GROUP BY items must be plain column references",
                g.span,
            ));
            continue;
        };
        match scope.resolve_column(qualifier.as_deref(), name, g.span) {
            Ok(Resolved {
                column: Some(column),
                dtype: Some(dtype),
                ..
            }) => {
                if !group_keys.iter().any(|k| k.column == column) {
                    group_keys.push(GroupKey {
                        column,
                        name: name.clone(),
                        dtype,
                    });
                }
            }
            Ok(_) => errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                format!("GROUP BY '{name}' must name a table column, not a computed CTE column"),
                g.span,
            )),
            Err(e) => errors.push(e),
        }
    }

    // Select list.
    let mut aggregates: Vec<AggregateSpec> = Vec::new();
    let mut outputs = Vec::new();
    for item in &select.items {
        let (expr, alias, span) = match item {
            SelectItem::Wildcard(span) | SelectItem::QualifiedWildcard(_, span) => {
                errors.push(ValidationError::new(
                    ErrorCode::NonAggregateOutput,
                    "'*' selects raw rows; the select list must consist of aggregates and group keys",
                    *span,
                ));
                continue;
            }
            SelectItem::Expr { expr, alias, span } => (expr, alias, *span),
        };
        if contains_window(expr) {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "window functions are not supported",
                expr.span,
            ));
            continue;
        }
        match &expr.kind {
            ExprKind::Function {
                name,
                args,
                distinct,
                ..
            } if is_supported_aggregate(name) => {
                match aggregate_spec(name, args, *distinct, expr.span, span, alias.as_deref(), &scope, catalog) {
                    Ok(spec) => {
                        outputs.push(OutputColumn::Aggregate(aggregates.len()));
                        aggregates.push(spec);
                    }
                    Err(mut e) => errors.append(&mut e),
                }
            }
            ExprKind::Function { name, .. } if !is_scalar_function(name) => {
                errors.push(ValidationError::new(
                    ErrorCode::UnsupportedAggregate,
                    format!(
                        "{name} is not a supported aggregate (supported: COUNT, COUNT(DISTINCT), SUM, AVG, VAR, STDDEV, COVAR)"
                    ),
                    expr.span,
                ));
            }
            ExprKind::Column { qualifier, name } => match scope.resolve_column(qualifier.as_deref(), name, expr.span) {
                Ok(r) => match r.column.and_then(|c| group_keys.iter().position(|k| k.column == c)) {
                    Some(i) => {
                        if let Some(a) = alias {
                            group_keys[i].name = a.clone();
                        }
                        outputs.push(OutputColumn::Key(i));
                    }
                    None => errors.push(ValidationError::new(
                        ErrorCode::NonAggregateOutput,
                        format!("'{name}' is neither an aggregate nor a GROUP BY key"),
                        expr.span,
                    )),
                },
                Err(e) => errors.push(e),
            },
            _ if contains_aggregate(expr) => errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "arithmetic on aggregate results is not supported; select the aggregates separately",
                expr.span,
            )),
            _ => errors.push(ValidationError::new(
                ErrorCode::NonAggregateOutput,
                "select items must be aggregates or GROUP BY keys",
                expr.span,
            )),
        }
    }

    // Output names must be unique.
    let mut names = HashSet::new();
    for o in &outputs {
        if let OutputColumn::Aggregate(i) = o {
            let base = aggregates[*i].alias.clone();
            let mut name = base.clone();
            let mut n = 2;
            while group_keys.iter().any(|k| k.name == name) || !names.insert(name.clone()) {
                name = format!("{base}_{n}");
                n += 1;
            }
            aggregates[*i].alias = name;
        }
    }

    if aggregates.is_empty() && errors.is_empty() {
        errors.push(ValidationError::new(
            ErrorCode::NonAggregateOutput,
            "the select list must contain at least one aggregate",
            select.span,
        ));
    }

    let lineage = if scope.structural_errors == 0 && !scope.sources.is_empty() {
        match catalog.resolve_privacy_unit(&scope.sources, &scope.edges) {
            Ok(l) => Some(l),
            Err(e) => {
                errors.push(ValidationError::new(ErrorCode::MissingPrivacyUnit, e.to_string(), select.span));
                None
            }
        }
    } else {
        None
    };

    if !errors.is_empty() {
        return Err(errors);
    }
    let lineage = lineage.expect("lineage resolved when there are no errors");
    let owner = lineage
        .owner_column(&scope.sources[0].alias)
        .cloned()
        .expect("every source has an owner");
    let row_filter = scope
        .filters
        .into_iter()
        .reduce(|a, b| Expr::binary(BinaryOp::And, a, b));
    Ok(QueryPlanSummary {
        aggregates,
        group_keys,
        sources: scope.sources,
        join_edges: scope.edges,
        row_filter,
        unit_lineage: lineage,
        owner,
        outputs,
    })
}

#[allow(clippy::too_many_arguments)]
fn aggregate_spec(
    name: &str,
    args: &FunctionArgs,
    distinct: bool,
    call_span: Span,
    item_span: Span,
    alias: Option<&str>,
    scope: &Scope,
    catalog: &Catalog,
) -> Result<AggregateSpec, Vec<ValidationError>> {
    let err = |code, msg: String| vec![ValidationError::new(code, msg, call_span)];
    let kind = aggregate_kind(name, distinct).expect("caller checked the name");
    if distinct && kind != AggregateKind::CountDistinct {
        return Err(err(
            ErrorCode::UnsupportedAggregate,
            format!("{name}(DISTINCT ...) is not supported; only COUNT(DISTINCT column) is"),
        ));
    }
    let list: &[Expr] = match args {
        FunctionArgs::Star if kind == AggregateKind::Count => &[],
        FunctionArgs::Star => {
            return Err(err(ErrorCode::UnsupportedSyntax, format!("{name}(*) is not valid")));
        }
        FunctionArgs::List(l) => l,
    };
    let expected = match kind {
        AggregateKind::Count => list.len().min(1),
        k => k.arity(),
    };
    if list.len() != expected {
        return Err(err(
            ErrorCode::UnsupportedSyntax,
            format!("{name} takes {expected} argument(s), got {}", list.len()),
        ));
    }
    let mut errors = Vec::new();
    let mut resolved = Vec::new();
    for a in list {
        if contains_aggregate(a) || contains_window(a) {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "nested aggregates are not supported",
                a.span,
            ));
            continue;
        }
        if contains_subquery(a) {
            errors.push(ValidationError::new(
                ErrorCode::UnsupportedSyntax,
                "subqueries inside aggregates are not supported",
                a.span,
            ));
            continue;
        }
        match scope.resolve_expr(a) {
            Ok(r) => resolved.push((a, r)),
            Err(mut e) => errors.append(&mut e),
        }
    }
    if !errors.is_empty() {
        return Err(errors);
    }
    let numeric = !matches!(kind, AggregateKind::Count | AggregateKind::CountDistinct);
    let mut bounds = Vec::new();
    if numeric {
        for (orig, r) in &resolved {
            match scope::bounds_of(&r.expr, scope, catalog) {
                Ok(b) => bounds.push(b),
                Err(why) => errors.push(ValidationError::new(
                    ErrorCode::MissingClampBounds,
                    format!("{name} argument '{orig}' has no clamp bounds: {why}"),
                    orig.span,
                )),
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
    }
    let default_alias = {
        let mut s = kind.name().to_ascii_lowercase();
        for (orig, _) in &resolved {
            s.push('_');
            match &orig.kind {
                ExprKind::Column { name, .. } => s.push_str(name),
                _ => s.push_str("expr"),
            }
        }
        s
    };
    Ok(AggregateSpec {
        kind,
        args: resolved.into_iter().map(|(_, r)| r.expr).collect(),
        bounds,
        alias: alias.map(str::to_string).unwrap_or(default_alias),
        span: item_span,
    })
}

#[cfg(test)]
mod tests;
