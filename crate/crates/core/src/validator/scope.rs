//! Name resolution over a flattened FROM clause.
//!
//! CTE references are inlined: their base tables join the outer source list
//! under the prefix `{binding}__`, their WHERE predicates join the row
//! filter, and their output columns become expressions over base columns.

use crate::catalog::{Catalog, ColumnRef, DataType, JoinEdge, SourceBinding};
use crate::mechanisms::ClampBounds;
use crate::sql::{
    BinaryOp, Expr, ExprKind, FunctionArgs, JoinKind, Literal, Query, Select, SelectItem, SetExpr, Span, TableFactor,
    UnaryOp,
};

use super::{is_supported_aggregate, ErrorCode, ValidationError};

/// Aggregates outside the supported set; used to classify misuse.
const OTHER_AGGREGATES: &[&str] = &[
    "MIN", "MAX", "MEDIAN", "MODE", "PERCENTILE_CONT", "PERCENTILE_DISC", "VAR_SAMP", "STDDEV_SAMP", "COVAR_SAMP",
    "CORR", "GROUP_CONCAT", "STRING_AGG", "ARRAY_AGG", "BOOL_AND", "BOOL_OR", "EVERY", "ANY_VALUE", "FIRST",
    "LAST", "TOTAL",
];

pub(crate) fn contains_aggregate(e: &Expr) -> bool {
    let mut found = false;
    e.walk(&mut |x| {
        if let ExprKind::Function { name, over: None, .. } = &x.kind {
            found |= is_supported_aggregate(name) || OTHER_AGGREGATES.contains(&name.as_str());
        }
    });
    found
}

pub(crate) fn contains_window(e: &Expr) -> bool {
    let mut found = false;
    e.walk(&mut |x| found |= matches!(&x.kind, ExprKind::Function { over: Some(_), .. }));
    found
}

pub(crate) fn contains_subquery(e: &Expr) -> bool {
    let mut found = false;
    e.walk(&mut |x| {
        found |= matches!(
            &x.kind,
            ExprKind::Subquery(_) | ExprKind::Exists { .. } | ExprKind::InSubquery { .. }
        )
    });
    found
}

/// What a column name resolves to.
#[derive(Debug, Clone)]
pub(crate) struct Resolved {
    /// Equivalent expression over base-table columns.
    pub expr: Expr,
    pub dtype: Option<DataType>,
    /// Set when the name is a pass-through of a base-table column.
    pub column: Option<ColumnRef>,
}

#[derive(Debug, Default)]
struct Binding {
    name: String,
    columns: Vec<(String, Resolved)>,
}

#[derive(Debug, Default)]
pub(crate) struct Scope {
    pub sources: Vec<SourceBinding>,
    pub edges: Vec<JoinEdge>,
    pub filters: Vec<Expr>,
    /// Errors that make the join graph incomplete; lineage is not checked
    /// when any occurred.
    pub structural_errors: usize,
    bindings: Vec<Binding>,
}

impl Scope {
    pub fn build(
        select: &Select,
        prefix: &str,
        ctes: &[(&str, &Query)],
        catalog: &Catalog,
        errors: &mut Vec<ValidationError>,
    ) -> Scope {
        let mut scope = Scope::default();
        let mut join_predicates: Vec<&Expr> = Vec::new();
        for (i, twj) in select.from.iter().enumerate() {
            if i > 0 {
                scope.structural(
                    errors,
                    ErrorCode::UnsupportedSyntax,
                    "comma joins are not supported; use JOIN ... ON a declared foreign key",
                    twj.relation.span(),
                );
            }
            scope.add_factor(&twj.relation, prefix, ctes, catalog, errors);
            for join in &twj.joins {
                scope.add_factor(&join.relation, prefix, ctes, catalog, errors);
                if join.kind != JoinKind::Inner {
                    scope.structural(
                        errors,
                        ErrorCode::UnsupportedSyntax,
                        "only INNER JOIN is supported",
                        join.span,
                    );
                }
                match &join.on {
                    Some(on) => join_predicates.push(on),
                    None if join.kind == JoinKind::Inner => scope.structural(
                        errors,
                        ErrorCode::UnsupportedSyntax,
                        "JOIN requires an ON clause",
                        join.span,
                    ),
                    None => {}
                }
            }
        }
        for on in join_predicates {
            for c in on.conjuncts() {
                scope.add_join_predicate(c, catalog, errors);
            }
        }
        if let Some(w) = &select.selection {
            if contains_subquery(w) {
                errors.push(ValidationError::new(
                    ErrorCode::UnsupportedSyntax,
                    "subqueries in WHERE are not supported",
                    w.span,
                ));
            } else if contains_aggregate(w) || contains_window(w) {
                errors.push(ValidationError::new(
                    ErrorCode::UnsupportedSyntax,
                    "aggregates are not allowed in WHERE",
                    w.span,
                ));
            } else {
                match scope.resolve_expr(w) {
                    Ok(r) => scope.filters.push(r.expr),
                    Err(mut e) => errors.append(&mut e),
                }
            }
        }
        scope
    }

    fn structural(&mut self, errors: &mut Vec<ValidationError>, code: ErrorCode, msg: impl Into<String>, span: Span) {
        self.structural_errors += 1;
        errors.push(ValidationError::new(code, msg, span));
    }

    fn add_factor(
        &mut self,
        factor: &TableFactor,
        prefix: &str,
        ctes: &[(&str, &Query)],
        catalog: &Catalog,
        errors: &mut Vec<ValidationError>,
    ) {
        let (name, alias, span) = match factor {
            TableFactor::Derived { span, .. } => {
                self.structural(
                    errors,
                    ErrorCode::NestedSubquery,
                    "subqueries in FROM are not allowed; define a CTE with WITH instead",
                    *span,
                );
                return;
            }
            TableFactor::Table { name, alias, span } => (name, alias, *span),
        };
        let binding = alias.as_deref().unwrap_or(name).to_string();
        if self.bindings.iter().any(|b| b.name == binding) {
            self.structural(
                errors,
                ErrorCode::UnsupportedSyntax,
                format!("'{binding}' appears more than once in FROM; give each occurrence a distinct alias"),
                span,
            );
            return;
        }
        if let Some(pos) = ctes.iter().position(|(n, _)| *n == name) {
            let (_, query) = ctes[pos];
            self.expand_cte(&binding, query, prefix, &ctes[..pos], catalog, errors);
            return;
        }
        let Some(schema) = catalog.table(name) else {
            self.structural(errors, ErrorCode::UnknownTable, format!("unknown table '{name}'"), span);
            return;
        };
        let source = format!("{prefix}{binding}");
        self.sources.push(SourceBinding::new(&source, name));
        let columns = schema
            .columns
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    Resolved {
                        expr: Expr::column(Some(&source), &c.name),
                        dtype: Some(c.dtype),
                        column: Some(ColumnRef::new(&source, &c.name)),
                    },
                )
            })
            .collect();
        self.bindings.push(Binding { name: binding, columns });
    }

    fn expand_cte(
        &mut self,
        binding: &str,
        query: &Query,
        prefix: &str,
        visible: &[(&str, &Query)],
        catalog: &Catalog,
        errors: &mut Vec<ValidationError>,
    ) {
        let shape_error = |this: &mut Scope, errors: &mut Vec<ValidationError>, what: &str, span: Span| {
            this.structural(
                errors,
                ErrorCode::UnsupportedSyntax,
                format!("CTE '{binding}' {what}; CTEs must be plain row-level SELECTs"),
                span,
            );
        };
        let select = match &query.body {
            SetExpr::Select(s) => s,
            SetExpr::SetOperation { span, .. } => return shape_error(self, errors, "uses a set operation", *span),
        };
        if !query.ctes.is_empty() {
            return shape_error(self, errors, "has a nested WITH", query.span);
        }
        if !query.order_by.is_empty() || query.limit.is_some() {
            return shape_error(self, errors, "uses ORDER BY or LIMIT", query.span);
        }
        if select.distinct || !select.group_by.is_empty() || select.having.is_some() {
            return shape_error(self, errors, "uses DISTINCT, GROUP BY or HAVING", select.span);
        }
        let inner_prefix = format!("{prefix}{binding}__");
        let inner = Scope::build(select, &inner_prefix, visible, catalog, errors);
        self.structural_errors += inner.structural_errors;
        let mut columns: Vec<(String, Resolved)> = Vec::new();
        for item in &select.items {
            match item {
                SelectItem::Wildcard(_) => {
                    for b in &inner.bindings {
                        columns.extend(b.columns.iter().cloned());
                    }
                }
                SelectItem::QualifiedWildcard(q, span) => match inner.bindings.iter().find(|b| &b.name == q) {
                    Some(b) => columns.extend(b.columns.iter().cloned()),
                    None => errors.push(ValidationError::new(
                        ErrorCode::UnknownColumn,
                        format!("'{q}.*' does not name a relation of CTE '{binding}'"),
                        *span,
                    )),
                },
                SelectItem::Expr { expr, alias, span } => {
                    if contains_aggregate(expr) || contains_window(expr) {
                        shape_error(self, errors, "aggregates", *span);
                        continue;
                    }
                    if contains_subquery(expr) {
                        shape_error(self, errors, "selects a subquery", *span);
                        continue;
                    }
                    let name = match (alias, &expr.kind) {
                        (Some(a), _) => a.clone(),
                        (None, ExprKind::Column { name, .. }) => name.clone(),
                        (None, _) => {
                            errors.push(ValidationError::new(
                                ErrorCode::UnsupportedSyntax,
                                format!("computed column of CTE '{binding}' needs an alias"),
                                *span,
                            ));
                            continue;
                        }
                    };
                    match inner.resolve_expr(expr) {
                        Ok(r) => columns.push((name, r)),
                        Err(mut e) => errors.append(&mut e),
                    }
                }
            }
        }
        self.sources.extend(inner.sources);
        self.edges.extend(inner.edges);
        self.filters.extend(inner.filters);
        self.bindings.push(Binding {
            name: binding.to_string(),
            columns,
        });
    }

    fn add_join_predicate(&mut self, c: &Expr, catalog: &Catalog, errors: &mut Vec<ValidationError>) {
        let ExprKind::Binary {
            op: BinaryOp::Eq,
            left,
            right,
        } = &c.kind
        else {
            return self.structural(
                errors,
                ErrorCode::UnsupportedSyntax,
                format!("join condition '{c}' is not an equality of two columns"),
                c.span,
            );
        };
        let side = |this: &Scope, e: &Expr| -> Result<Option<ColumnRef>, ValidationError> {
            match &e.kind {
                ExprKind::Column { qualifier, name } => {
                    Ok(this.resolve_column(qualifier.as_deref(), name, e.span)?.column)
                }
                _ => Ok(None),
            }
        };
        let (l, r) = match (side(self, left), side(self, right)) {
            (Ok(l), Ok(r)) => (l, r),
            (l, r) => {
                for e in [l.err(), r.err()].into_iter().flatten() {
                    self.structural_errors += 1;
                    errors.push(e);
                }
                return;
            }
        };
        let (Some(l), Some(r)) = (l, r) else {
            return self.structural(
                errors,
                ErrorCode::UnsupportedSyntax,
                format!("join condition '{c}' is not an equality of two table columns"),
                c.span,
            );
        };
        let table = |s: &str| {
            self.sources
                .iter()
                .find(|b| b.alias == s)
                .map(|b| b.table.clone())
                .unwrap_or_default()
        };
        if !catalog.is_foreign_key(&table(&l.source), &l.column, &table(&r.source), &r.column) {
            return self.structural(
                errors,
                ErrorCode::UnsupportedSyntax,
                format!("join condition '{c}' does not follow a declared foreign key"),
                c.span,
            );
        }
        self.edges.push(JoinEdge { left: l, right: r });
    }

    pub fn resolve_column(&self, qualifier: Option<&str>, name: &str, span: Span) -> Result<Resolved, ValidationError> {
        let err = |msg: String| ValidationError::new(ErrorCode::UnknownColumn, msg, span);
        match qualifier {
            Some(q) => {
                let b = self
                    .bindings
                    .iter()
                    .find(|b| b.name == q)
                    .ok_or_else(|| err(format!("'{q}' is not a relation in FROM")))?;
                b.columns
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, r)| with_span(r, span))
                    .ok_or_else(|| err(format!("unknown column '{q}.{name}'")))
            }
            None => {
                let mut hits = self
                    .bindings
                    .iter()
                    .flat_map(|b| b.columns.iter().filter(|(n, _)| n == name).map(move |c| (b, c)));
                match (hits.next(), hits.next()) {
                    (Some((_, (_, r))), None) => Ok(with_span(r, span)),
                    (None, _) => Err(err(format!("unknown column '{name}'"))),
                    (Some((a, _)), Some((b, _))) => Err(err(format!(
                        "column '{name}' is ambiguous (in '{}' and '{}'); qualify it",
                        a.name, b.name
                    ))),
                }
            }
        }
    }

    /// Rewrites `e` over base-table columns.
    pub fn resolve_expr(&self, e: &Expr) -> Result<Resolved, Vec<ValidationError>> {
        if let ExprKind::Column { qualifier, name } = &e.kind {
            return self.resolve_column(qualifier.as_deref(), name, e.span).map_err(|x| vec![x]);
        }
        let mut errors = Vec::new();
        let expr = map_columns(e, &mut |q, n, span| match self.resolve_column(q, n, span) {
            Ok(r) => r.expr,
            Err(x) => {
                errors.push(x);
                Expr::new(
                    ExprKind::Column {
                        qualifier: q.map(str::to_string),
                        name: n.to_string(),
                    },
                    span,
                )
            }
        });
        if errors.is_empty() {
            Ok(Resolved {
                expr,
                dtype: None,
                column: None,
            })
        } else {
            Err(errors)
        }
    }

    fn table_of(&self, source: &str) -> Option<&str> {
        self.sources.iter().find(|s| s.alias == source).map(|s| s.table.as_str())
    }
}

fn with_span(r: &Resolved, span: Span) -> Resolved {
    let mut r = r.clone();
    r.expr.span = span;
    r
}

/// Copies `e`, replacing every column reference by `f(qualifier, name, span)`.
pub(crate) fn map_columns(e: &Expr, f: &mut dyn FnMut(Option<&str>, &str, Span) -> Expr) -> Expr {
    let mut m = |x: &Expr| Box::new(map_columns(x, f));
    let kind = match &e.kind {
        ExprKind::Column { qualifier, name } => return f(qualifier.as_deref(), name, e.span),
        ExprKind::Literal(_) | ExprKind::Exists { .. } | ExprKind::Subquery(_) => e.kind.clone(),
        ExprKind::Binary { op, left, right } => ExprKind::Binary {
            op: *op,
            left: m(left),
            right: m(right),
        },
        ExprKind::Unary { op, expr } => ExprKind::Unary { op: *op, expr: m(expr) },
        ExprKind::Function {
            name,
            args,
            distinct,
            over,
        } => ExprKind::Function {
            name: name.clone(),
            args: match args {
                FunctionArgs::Star => FunctionArgs::Star,
                FunctionArgs::List(l) => FunctionArgs::List(l.iter().map(|x| map_columns(x, f)).collect()),
            },
            distinct: *distinct,
            over: over.clone(),
        },
        ExprKind::Case {
            operand,
            branches,
            else_result,
        } => ExprKind::Case {
            operand: operand.as_ref().map(|o| Box::new(map_columns(o, f))),
            branches: branches
                .iter()
                .map(|(w, t)| (map_columns(w, f), map_columns(t, f)))
                .collect(),
            else_result: else_result.as_ref().map(|o| Box::new(map_columns(o, f))),
        },
        ExprKind::InList { expr, list, negated } => ExprKind::InList {
            expr: m(expr),
            list: list.iter().map(|x| map_columns(x, f)).collect(),
            negated: *negated,
        },
        ExprKind::InSubquery {
            expr,
            subquery,
            negated,
        } => ExprKind::InSubquery {
            expr: m(expr),
            subquery: subquery.clone(),
            negated: *negated,
        },
        ExprKind::Between {
            expr,
            low,
            high,
            negated,
        } => ExprKind::Between {
            expr: Box::new(map_columns(expr, f)),
            low: Box::new(map_columns(low, f)),
            high: Box::new(map_columns(high, f)),
            negated: *negated,
        },
        ExprKind::IsNull { expr, negated } => ExprKind::IsNull {
            expr: m(expr),
            negated: *negated,
        },
        ExprKind::Like { expr, pattern, negated } => ExprKind::Like {
            expr: Box::new(map_columns(expr, f)),
            pattern: Box::new(map_columns(pattern, f)),
            negated: *negated,
        },
    };
    Expr::new(kind, e.span)
}

/// Interval of values `e` can take once every column in it is clamped.
/// `e` must already be resolved to base-table columns.
pub(crate) fn bounds_of(e: &Expr, scope: &Scope, catalog: &Catalog) -> Result<ClampBounds, String> {
    let interval = |lo: f64, hi: f64| {
        if lo.is_finite() && hi.is_finite() {
            Ok(ClampBounds { lo, hi })
        } else {
            Err("bounds overflow".to_string())
        }
    };
    match &e.kind {
        ExprKind::Column { qualifier, name } => {
            let source = qualifier.as_deref().unwrap_or_default();
            let spec = scope
                .table_of(source)
                .and_then(|t| catalog.table(t))
                .and_then(|t| t.column(name))
                .ok_or_else(|| format!("unknown column {source}.{name}"))?;
            if !spec.dtype.is_numeric() {
                return Err(format!("column '{name}' is not numeric"));
            }
            spec.clamp.ok_or_else(|| format!("column '{name}' has no declared clamp bounds"))
        }
        ExprKind::Literal(Literal::Integer(i)) => interval(*i as f64, *i as f64),
        ExprKind::Literal(Literal::Real(r)) => interval(*r, *r),
        ExprKind::Unary { op: UnaryOp::Neg, expr } => {
            let b = bounds_of(expr, scope, catalog)?;
            interval(-b.hi, -b.lo)
        }
        ExprKind::Binary { op, left, right } => {
            let a = bounds_of(left, scope, catalog)?;
            let b = bounds_of(right, scope, catalog)?;
            match op {
                BinaryOp::Plus => interval(a.lo + b.lo, a.hi + b.hi),
                BinaryOp::Minus => interval(a.lo - b.hi, a.hi - b.lo),
                BinaryOp::Multiply => corners(a, b, |x, y| x * y),
                BinaryOp::Divide if b.lo > 0.0 || b.hi < 0.0 => corners(a, b, |x, y| x / y),
                BinaryOp::Divide => Err(format!("divisor '{right}' may be zero")),
                _ => Err(format!("operator in '{e}' is not interval arithmetic")),
            }
        }
        _ => Err(format!("'{e}' is not arithmetic over clamped columns")),
    }
}

fn corners(a: ClampBounds, b: ClampBounds, f: impl Fn(f64, f64) -> f64) -> Result<ClampBounds, String> {
    let v = [f(a.lo, b.lo), f(a.lo, b.hi), f(a.hi, b.lo), f(a.hi, b.hi)];
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi.is_finite() {
        Ok(ClampBounds { lo, hi })
    } else {
        Err("bounds overflow".to_string())
    }
}
