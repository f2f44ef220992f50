//! In-memory reference engine.
//!
//! Executes the SQL subset the proxy emits, plus the usual conveniences for
//! ad-hoc inspection: CTEs, derived tables, inner/left/cross joins (hash
//! joins on equality conjuncts), WHERE, GROUP BY with COUNT/SUM/AVG/MIN/MAX,
//! HAVING, `ROW_NUMBER`/`RANK`/`DENSE_RANK` windows, DISTINCT, ORDER BY and
//! LIMIT. Arithmetic follows SQLite: integer division truncates and NULL
//! propagates.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::sql::{
    parse_sql, BinaryOp, Expr, ExprKind, FunctionArgs, JoinKind, Literal, OrderItem, Query, Select, SelectItem,
    SetExpr, TableFactor, UnaryOp,
};
use crate::Value;

use super::{coerce, BackendAdapter, BackendError, Capabilities, RowSet, TableData};

#[derive(Debug, Clone)]
struct Col {
    qualifier: Option<String>,
    name: String,
    /// Synthetic columns (aggregate and window results) are not visible to
    /// name lookup or `*`.
    hidden: bool,
}

#[derive(Debug, Clone, Default)]
struct Relation {
    cols: Vec<Col>,
    rows: Vec<Vec<Value>>,
}

type Env = HashMap<String, Arc<Relation>>;

#[derive(Default)]
pub struct MemoryAdapter {
    tables: HashMap<String, Arc<Relation>>,
    no_row_numbering: bool,
}

impl MemoryAdapter {
    pub fn new() -> Self {
        Self::default()
    }

    /// An engine that reports no window support, so the proxy falls back to
    /// capping rows in process.
    pub fn without_row_numbering() -> Self {
        MemoryAdapter {
            no_row_numbering: true,
            ..Self::default()
        }
    }
}

impl BackendAdapter for MemoryAdapter {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            row_numbering: !self.no_row_numbering,
        }
    }

    fn execute(&mut self, sql: &str) -> Result<RowSet, BackendError> {
        let q = parse_sql(sql).map_err(|e| BackendError::sql("SYNTAX_ERROR", e.to_string(), sql))?;
        let exec = Exec {
            tables: &self.tables,
            windows: !self.no_row_numbering,
        };
        let rel = exec
            .query(&q, &Env::new())
            .map_err(|(code, msg)| BackendError::sql(code, msg, sql))?;
        Ok(RowSet {
            columns: rel.cols.into_iter().map(|c| c.name).collect(),
            rows: rel.rows,
        })
    }

    fn load_table(&mut self, data: &TableData) -> Result<(), BackendError> {
        let width = data.schema.columns.len();
        let mut rows = Vec::with_capacity(data.rows.len());
        for (i, r) in data.rows.iter().enumerate() {
            if r.len() != width {
                return Err(BackendError::Load(format!(
                    "row {i} of '{}' has {} values, expected {width}",
                    data.schema.name,
                    r.len()
                )));
            }
            rows.push(
                r.iter()
                    .zip(&data.schema.columns)
                    .map(|(v, c)| coerce(v.clone(), c.dtype))
                    .collect(),
            );
        }
        let cols = data
            .schema
            .columns
            .iter()
            .map(|c| Col {
                qualifier: None,
                name: c.name.clone(),
                hidden: false,
            })
            .collect();
        self.tables.insert(data.schema.name.clone(), Arc::new(Relation { cols, rows }));
        Ok(())
    }
}

type ExecResult<T> = Result<T, (&'static str, String)>;

fn unsupported<T>(what: impl Into<String>) -> ExecResult<T> {
    Err(("UNSUPPORTED", what.into()))
}

struct Exec<'a> {
    tables: &'a HashMap<String, Arc<Relation>>,
    windows: bool,
}

const AGGREGATES: &[&str] = &["COUNT", "SUM", "AVG", "MIN", "MAX", "TOTAL"];

fn is_aggregate_call(e: &Expr) -> bool {
    matches!(&e.kind, ExprKind::Function { name, over: None, .. } if AGGREGATES.contains(&name.as_str()))
}

fn collect_calls(e: &Expr, pred: &dyn Fn(&Expr) -> bool, out: &mut Vec<Expr>) {
    e.walk(&mut |x| {
        if pred(x) && !out.iter().any(|y| y.to_string() == x.to_string()) {
            out.push(x.clone());
        }
    });
}

impl Exec<'_> {
    fn query(&self, q: &Query, outer: &Env) -> ExecResult<Relation> {
        let mut env = outer.clone();
        for cte in &q.ctes {
            let rel = self.query(&cte.query, &env)?;
            env.insert(cte.name.clone(), Arc::new(rel));
        }
        let SetExpr::Select(select) = &q.body else {
            return unsupported("set operations");
        };
        let limit = match &q.limit {
            None => None,
            Some(e) => match &e.kind {
                ExprKind::Literal(Literal::Integer(n)) if *n >= 0 => Some(*n as usize),
                _ => return unsupported("LIMIT must be a nonnegative integer literal"),
            },
        };
        self.select(select, &env, &q.order_by, limit)
    }

    fn factor(&self, f: &TableFactor, env: &Env) -> ExecResult<Relation> {
        let (mut rel, qualifier) = match f {
            TableFactor::Table { name, alias, .. } => {
                let base = env
                    .get(name)
                    .or_else(|| self.tables.get(name))
                    .ok_or(("UNKNOWN_TABLE", format!("no such table: {name}")))?;
                ((**base).clone(), alias.clone().unwrap_or_else(|| name.clone()))
            }
            TableFactor::Derived { subquery, alias, .. } => (
                self.query(subquery, env)?,
                alias.clone().unwrap_or_else(|| "subquery".into()),
            ),
        };
        for c in &mut rel.cols {
            c.qualifier = Some(qualifier.clone());
        }
        Ok(rel)
    }

    fn from(&self, s: &Select, env: &Env) -> ExecResult<Relation> {
        if s.from.is_empty() {
            return Ok(Relation {
                cols: vec![],
                rows: vec![vec![]],
            });
        }
        let mut acc: Option<Relation> = None;
        for twj in &s.from {
            let mut rel = self.factor(&twj.relation, env)?;
            for j in &twj.joins {
                let right = self.factor(&j.relation, env)?;
                rel = join(rel, right, j.kind, j.on.as_ref())?;
            }
            acc = Some(match acc {
                None => rel,
                Some(left) => join(left, rel, JoinKind::Cross, None)?,
            });
        }
        Ok(acc.expect("nonempty FROM"))
    }

    fn select(&self, s: &Select, env: &Env, order_by: &[OrderItem], limit: Option<usize>) -> ExecResult<Relation> {
        let mut input = self.from(s, env)?;
        if let Some(w) = &s.selection {
            let p = compile(w, &input.cols, &Subst::default())?;
            input.rows.retain(|r| eval(&p, r).is_truthy());
        }

        let item_exprs: Vec<&Expr> = s
            .items
            .iter()
            .filter_map(|i| match i {
                SelectItem::Expr { expr, .. } => Some(expr),
                _ => None,
            })
            .collect();
        let mut aggs = Vec::new();
        for e in item_exprs.iter().copied().chain(s.having.iter()).chain(order_by.iter().map(|o| &o.expr)) {
            collect_calls(e, &is_aggregate_call, &mut aggs);
        }
        let grouped = !s.group_by.is_empty() || !aggs.is_empty();

        let (work, subst) = if grouped {
            self.aggregate(input, s, &aggs)?
        } else {
            let mut wins = Vec::new();
            for e in item_exprs.iter().copied().chain(order_by.iter().map(|o| &o.expr)) {
                collect_calls(e, &|x| matches!(&x.kind, ExprKind::Function { over: Some(_), .. }), &mut wins);
            }
            if !wins.is_empty() && !self.windows {
                return unsupported("window functions are disabled on this engine");
            }
            window(input, &wins)?
        };

        let work = if let Some(h) = &s.having {
            let p = compile(h, &work.cols, &subst)?;
            Relation {
                rows: work.rows.into_iter().filter(|r| eval(&p, r).is_truthy()).collect(),
                cols: work.cols,
            }
        } else {
            work
        };

        // Projection.
        let mut out_cols = Vec::new();
        let mut programs = Vec::new();
        for item in &s.items {
            match item {
                SelectItem::Wildcard(_) | SelectItem::QualifiedWildcard(..) => {
                    let q = match item {
                        SelectItem::QualifiedWildcard(q, _) => Some(q.as_str()),
                        _ => None,
                    };
                    let mut any = false;
                    for (i, c) in work.cols.iter().enumerate() {
                        if !c.hidden && (q.is_none() || c.qualifier.as_deref() == q) {
                            any = true;
                            out_cols.push(c.name.clone());
                            programs.push(Cx::Col(i));
                        }
                    }
                    if !any && q.is_some() {
                        return Err(("UNKNOWN_TABLE", format!("no such table: {}", q.unwrap_or_default())));
                    }
                }
                SelectItem::Expr { expr, alias, .. } => {
                    out_cols.push(match (alias, &expr.kind) {
                        (Some(a), _) => a.clone(),
                        (None, ExprKind::Column { name, .. }) => name.clone(),
                        (None, _) => expr.to_string(),
                    });
                    programs.push(compile(expr, &work.cols, &subst)?);
                }
            }
        }
        let mut sort_programs = Vec::new();
        for o in order_by {
            let by_output = match &o.expr.kind {
                ExprKind::Column { qualifier: None, name } => out_cols.iter().position(|c| c == name).map(Sort::Output),
                ExprKind::Literal(Literal::Integer(n)) if *n >= 1 && (*n as usize) <= out_cols.len() => {
                    Some(Sort::Output(*n as usize - 1))
                }
                _ => None,
            };
            let s = match by_output {
                Some(s) => s,
                None => Sort::Input(compile(&o.expr, &work.cols, &subst)?),
            };
            sort_programs.push((s, o.desc));
        }

        let mut rows: Vec<(Vec<Value>, Vec<Value>)> = work
            .rows
            .iter()
            .map(|r| {
                let out: Vec<Value> = programs.iter().map(|p| eval(p, r)).collect();
                let keys = sort_programs
                    .iter()
                    .map(|(s, _)| match s {
                        Sort::Output(i) => out[*i].clone(),
                        Sort::Input(p) => eval(p, r),
                    })
                    .collect();
                (out, keys)
            })
            .collect();
        if s.distinct {
            let mut seen = HashSet::new();
            rows.retain(|(out, _)| seen.insert(out.clone()));
        }
        if !sort_programs.is_empty() {
            rows.sort_by(|a, b| {
                for (i, (_, desc)) in sort_programs.iter().enumerate() {
                    let o = a.1[i].cmp(&b.1[i]);
                    let o = if *desc { o.reverse() } else { o };
                    if o != Ordering::Equal {
                        return o;
                    }
                }
                Ordering::Equal
            });
        }
        let mut rows: Vec<Vec<Value>> = rows.into_iter().map(|(o, _)| o).collect();
        if let Some(n) = limit {
            rows.truncate(n);
        }
        Ok(Relation {
            cols: out_cols
                .into_iter()
                .map(|name| Col {
                    qualifier: None,
                    name,
                    hidden: false,
                })
                .collect(),
            rows,
        })
    }

    fn aggregate(&self, input: Relation, s: &Select, aggs: &[Expr]) -> ExecResult<(Relation, Subst)> {
        let keys: Vec<Cx> = s
            .group_by
            .iter()
            .map(|g| compile(g, &input.cols, &Subst::default()))
            .collect::<ExecResult<_>>()?;
        let mut specs = Vec::new();
        for a in aggs {
            let ExprKind::Function { name, args, distinct, .. } = &a.kind else {
                unreachable!("collected aggregate calls are functions")
            };
            let arg = match args {
                FunctionArgs::Star if name == "COUNT" => None,
                FunctionArgs::List(l) if l.len() == 1 => {
                    if l[0].walk_any(&is_aggregate_call) {
                        return unsupported("nested aggregates");
                    }
                    Some(compile(&l[0], &input.cols, &Subst::default())?)
                }
                _ => return unsupported(format!("{name} takes exactly one argument")),
            };
            specs.push((name.clone(), arg, *distinct));
        }
        let mut index: HashMap<Vec<Value>, usize> = HashMap::new();
        let mut groups: Vec<(usize, Vec<Acc>)> = Vec::new();
        for (ri, row) in input.rows.iter().enumerate() {
            let key: Vec<Value> = keys.iter().map(|k| eval(k, row)).collect();
            let g = *index.entry(key).or_insert_with(|| {
                groups.push((ri, specs.iter().map(|(n, _, d)| Acc::new(n, *d)).collect()));
                groups.len() - 1
            });
            for ((_, arg, _), acc) in specs.iter().zip(groups[g].1.iter_mut()) {
                acc.push(arg.as_ref().map(|a| eval(a, row)));
            }
        }
        let width = input.cols.len();
        if groups.is_empty() && s.group_by.is_empty() {
            // An aggregate over no rows still yields one row.
            let accs = specs.iter().map(|(n, _, d)| Acc::new(n, *d)).collect();
            let rows = vec![vec![Value::Null; width].into_iter().chain(finish(accs)).collect()];
            let cols = with_hidden(input.cols, aggs.len(), "agg");
            return Ok((Relation { cols, rows }, Subst::aggs(aggs, width)));
        }
        let rows = groups
            .into_iter()
            .map(|(ri, accs)| input.rows[ri].iter().cloned().chain(finish(accs)).collect())
            .collect();
        let cols = with_hidden(input.cols, aggs.len(), "agg");
        Ok((Relation { cols, rows }, Subst::aggs(aggs, width)))
    }
}

enum Sort {
    Output(usize),
    Input(Cx),
}

fn with_hidden(mut cols: Vec<Col>, n: usize, tag: &str) -> Vec<Col> {
    for j in 0..n {
        cols.push(Col {
            qualifier: None,
            name: format!("#{tag}{j}"),
            hidden: true,
        });
    }
    cols
}

fn window(mut input: Relation, wins: &[Expr]) -> ExecResult<(Relation, Subst)> {
    let width = input.cols.len();
    for w in wins {
        let ExprKind::Function {
            name,
            args,
            over: Some(spec),
            ..
        } = &w.kind
        else {
            unreachable!("collected window calls have OVER")
        };
        if !matches!(name.as_str(), "ROW_NUMBER" | "RANK" | "DENSE_RANK")
            || !matches!(args, FunctionArgs::List(l) if l.is_empty())
        {
            return unsupported(format!("window function {name}"));
        }
        let part: Vec<Cx> = spec
            .partition_by
            .iter()
            .map(|e| compile(e, &input.cols, &Subst::default()))
            .collect::<ExecResult<_>>()?;
        let ord: Vec<(Cx, bool)> = spec
            .order_by
            .iter()
            .map(|o| Ok((compile(&o.expr, &input.cols, &Subst::default())?, o.desc)))
            .collect::<ExecResult<_>>()?;
        let keyed: Vec<(Vec<Value>, Vec<Value>)> = input
            .rows
            .iter()
            .map(|r| {
                (
                    part.iter().map(|p| eval(p, r)).collect(),
                    ord.iter().map(|(p, _)| eval(p, r)).collect(),
                )
            })
            .collect();
        let mut idx: Vec<usize> = (0..input.rows.len()).collect();
        let cmp_ord = |a: &[Value], b: &[Value]| {
            for (i, (_, desc)) in ord.iter().enumerate() {
                let o = a[i].cmp(&b[i]);
                let o = if *desc { o.reverse() } else { o };
                if o != Ordering::Equal {
                    return o;
                }
            }
            Ordering::Equal
        };
        idx.sort_by(|&a, &b| {
            keyed[a]
                .0
                .cmp(&keyed[b].0)
                .then_with(|| cmp_ord(&keyed[a].1, &keyed[b].1))
                .then(a.cmp(&b))
        });
        let mut numbers = vec![0i64; input.rows.len()];
        let (mut row_number, mut rank, mut dense) = (0i64, 0i64, 0i64);
        for (pos, &i) in idx.iter().enumerate() {
            let new_partition = pos == 0 || keyed[idx[pos - 1]].0 != keyed[i].0;
            if new_partition {
                row_number = 0;
                rank = 0;
                dense = 0;
            }
            row_number += 1;
            let tie = !new_partition && cmp_ord(&keyed[idx[pos - 1]].1, &keyed[i].1) == Ordering::Equal;
            if !tie {
                rank = row_number;
                dense += 1;
            }
            numbers[i] = match name.as_str() {
                "ROW_NUMBER" => row_number,
                "RANK" => rank,
                _ => dense,
            };
        }
        for (r, n) in input.rows.iter_mut().zip(numbers) {
            r.push(Value::Int(n));
        }
    }
    let cols = with_hidden(input.cols, wins.len(), "win");
    Ok((
        Relation { cols, rows: input.rows },
        Subst {
            calls: wins.iter().enumerate().map(|(j, w)| (w.to_string(), width + j)).collect(),
        },
    ))
}

fn join(left: Relation, right: Relation, kind: JoinKind, on: Option<&Expr>) -> ExecResult<Relation> {
    let mut cols = left.cols.clone();
    cols.extend(right.cols.iter().cloned());
    let lw = left.cols.len();
    let rw = right.cols.len();
    let (mut lkeys, mut rkeys, mut residual) = (Vec::new(), Vec::new(), Vec::new());
    if let Some(on) = on {
        for c in on.conjuncts() {
            if let ExprKind::Binary {
                op: BinaryOp::Eq,
                left: a,
                right: b,
            } = &c.kind
            {
                let side = |e: &Expr, rel: &[Col]| compile(e, rel, &Subst::default()).ok();
                if let (Some(x), Some(y)) = (side(a, &left.cols), side(b, &right.cols)) {
                    lkeys.push(x);
                    rkeys.push(y);
                    continue;
                }
                if let (Some(x), Some(y)) = (side(b, &left.cols), side(a, &right.cols)) {
                    lkeys.push(x);
                    rkeys.push(y);
                    continue;
                }
            }
            residual.push(compile(c, &cols, &Subst::default())?);
        }
    }
    if matches!(kind, JoinKind::Right | JoinKind::Full) {
        return unsupported("RIGHT and FULL joins");
    }
    let mut index: HashMap<Vec<Value>, Vec<usize>> = HashMap::new();
    for (i, r) in right.rows.iter().enumerate() {
        let k: Vec<Value> = rkeys.iter().map(|p| eval(p, r)).collect();
        if k.iter().any(Value::is_null) {
            continue;
        }
        index.entry(k).or_default().push(i);
    }
    let all: Vec<usize> = (0..right.rows.len()).collect();
    let mut rows = Vec::new();
    for l in &left.rows {
        let candidates: &[usize] = if lkeys.is_empty() {
            &all
        } else {
            let k: Vec<Value> = lkeys.iter().map(|p| eval(p, l)).collect();
            index.get(&k).map(Vec::as_slice).unwrap_or(&[])
        };
        let mut matched = false;
        for &i in candidates {
            let mut row = Vec::with_capacity(lw + rw);
            row.extend_from_slice(l);
            row.extend_from_slice(&right.rows[i]);
            if residual.iter().all(|p| eval(p, &row).is_truthy()) {
                matched = true;
                rows.push(row);
            }
        }
        if !matched && kind == JoinKind::Left {
            let mut row = l.clone();
            row.extend(std::iter::repeat_n(Value::Null, rw));
            rows.push(row);
        }
    }
    Ok(Relation { cols, rows })
}

/// Precomputed call results (aggregates or windows) addressable by the
/// call's SQL text.
#[derive(Default)]
struct Subst {
    calls: HashMap<String, usize>,
}

impl Subst {
    fn aggs(aggs: &[Expr], offset: usize) -> Self {
        Subst {
            calls: aggs.iter().enumerate().map(|(j, a)| (a.to_string(), offset + j)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
enum Cx {
    Col(usize),
    Lit(Value),
    Bin(BinaryOp, Box<Cx>, Box<Cx>),
    Neg(Box<Cx>),
    Not(Box<Cx>),
    Case {
        operand: Option<Box<Cx>>,
        branches: Vec<(Cx, Cx)>,
        otherwise: Option<Box<Cx>>,
    },
    InList(Box<Cx>, Vec<Cx>, bool),
    Between(Box<Cx>, Box<Cx>, Box<Cx>, bool),
    IsNull(Box<Cx>, bool),
    Like(Box<Cx>, Box<Cx>, bool),
    Func(String, Vec<Cx>),
}

fn resolve(cols: &[Col], qualifier: Option<&str>, name: &str) -> ExecResult<usize> {
    let mut hits = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.hidden && c.name == name && (qualifier.is_none() || c.qualifier.as_deref() == qualifier));
    match (hits.next(), hits.next()) {
        (Some((i, _)), None) => Ok(i),
        (None, _) => Err((
            "UNKNOWN_COLUMN",
            match qualifier {
                Some(q) => format!("no such column: {q}.{name}"),
                None => format!("no such column: {name}"),
            },
        )),
        _ => Err(("AMBIGUOUS_COLUMN", format!("ambiguous column name: {name}"))),
    }
}

fn compile(e: &Expr, cols: &[Col], subst: &Subst) -> ExecResult<Cx> {
    let c = |x: &Expr| compile(x, cols, subst).map(Box::new);
    Ok(match &e.kind {
        ExprKind::Column { qualifier, name } => Cx::Col(resolve(cols, qualifier.as_deref(), name)?),
        ExprKind::Literal(l) => Cx::Lit(match l {
            Literal::Integer(i) => Value::Int(*i),
            Literal::Real(r) => Value::Real(*r),
            Literal::String(s) => Value::Text(s.clone()),
            Literal::Boolean(b) => Value::Int(i64::from(*b)),
            Literal::Null => Value::Null,
        }),
        ExprKind::Binary { op, left, right } => Cx::Bin(*op, c(left)?, c(right)?),
        ExprKind::Unary { op: UnaryOp::Neg, expr } => Cx::Neg(c(expr)?),
        ExprKind::Unary { op: UnaryOp::Not, expr } => Cx::Not(c(expr)?),
        ExprKind::Function { name, args, over, .. } => {
            if let Some(&i) = subst.calls.get(&e.to_string()) {
                return Ok(Cx::Col(i));
            }
            if over.is_some() || AGGREGATES.contains(&name.as_str()) {
                return unsupported(format!("{name} is not allowed here"));
            }
            let args = match args {
                FunctionArgs::Star => return unsupported(format!("{name}(*)")),
                FunctionArgs::List(l) => l.iter().map(|a| compile(a, cols, subst)).collect::<ExecResult<_>>()?,
            };
            if !SCALARS.contains(&name.as_str()) {
                return Err(("UNKNOWN_FUNCTION", format!("no such function: {name}")));
            }
            Cx::Func(name.clone(), args)
        }
        ExprKind::Case {
            operand,
            branches,
            else_result,
        } => Cx::Case {
            operand: operand.as_ref().map(|o| c(o)).transpose()?,
            branches: branches
                .iter()
                .map(|(w, t)| Ok((compile(w, cols, subst)?, compile(t, cols, subst)?)))
                .collect::<ExecResult<_>>()?,
            otherwise: else_result.as_ref().map(|o| c(o)).transpose()?,
        },
        ExprKind::InList { expr, list, negated } => Cx::InList(
            c(expr)?,
            list.iter().map(|x| compile(x, cols, subst)).collect::<ExecResult<_>>()?,
            *negated,
        ),
        ExprKind::Between {
            expr,
            low,
            high,
            negated,
        } => Cx::Between(c(expr)?, c(low)?, c(high)?, *negated),
        ExprKind::IsNull { expr, negated } => Cx::IsNull(c(expr)?, *negated),
        ExprKind::Like { expr, pattern, negated } => Cx::Like(c(expr)?, c(pattern)?, *negated),
        ExprKind::InSubquery { .. } | ExprKind::Exists { .. } | ExprKind::Subquery(_) => {
            return unsupported("subqueries in expressions")
        }
    })
}

const SCALARS: &[&str] = &[
    "ABS", "COALESCE", "IFNULL", "NULLIF", "LOWER", "UPPER", "LENGTH", "ROUND", "FLOOR", "CEIL", "CEILING", "SQRT",
    "EXP", "LN", "POWER", "SIGN",
];

fn truth(v: &Value) -> Option<bool> {
    if v.is_null() {
        None
    } else {
        Some(v.is_truthy())
    }
}

fn boolean(b: Option<bool>) -> Value {
    match b {
        None => Value::Null,
        Some(b) => Value::Int(i64::from(b)),
    }
}

fn numeric(v: &Value) -> Option<Value> {
    match v {
        Value::Int(_) | Value::Real(_) => Some(v.clone()),
        Value::Bool(b) => Some(Value::Int(i64::from(*b))),
        Value::Text(s) => s
            .trim()
            .parse::<i64>()
            .map(Value::Int)
            .ok()
            .or_else(|| s.trim().parse::<f64>().ok().map(Value::Real)),
        Value::Null => None,
    }
}

fn arith(op: BinaryOp, a: &Value, b: &Value) -> Value {
    let (Some(a), Some(b)) = (numeric(a), numeric(b)) else {
        return Value::Null;
    };
    if let (Value::Int(x), Value::Int(y)) = (&a, &b) {
        let r = match op {
            BinaryOp::Plus => x.checked_add(*y),
            BinaryOp::Minus => x.checked_sub(*y),
            BinaryOp::Multiply => x.checked_mul(*y),
            BinaryOp::Divide if *y == 0 => return Value::Null,
            BinaryOp::Divide => x.checked_div(*y),
            BinaryOp::Modulo if *y == 0 => return Value::Null,
            BinaryOp::Modulo => x.checked_rem(*y),
            _ => None,
        };
        if let Some(r) = r {
            return Value::Int(r);
        }
    }
    let (x, y) = (a.as_f64().unwrap_or(0.0), b.as_f64().unwrap_or(0.0));
    match op {
        BinaryOp::Plus => Value::Real(x + y),
        BinaryOp::Minus => Value::Real(x - y),
        BinaryOp::Multiply => Value::Real(x * y),
        BinaryOp::Divide if y == 0.0 => Value::Null,
        BinaryOp::Divide => Value::Real(x / y),
        BinaryOp::Modulo if y == 0.0 => Value::Null,
        BinaryOp::Modulo => Value::Real(x % y),
        _ => Value::Null,
    }
}

fn like(text: &str, pattern: &str) -> bool {
    fn go(t: &[char], p: &[char]) -> bool {
        match p.split_first() {
            None => t.is_empty(),
            Some(('%', rest)) => (0..=t.len()).any(|i| go(&t[i..], rest)),
            Some(('_', rest)) => !t.is_empty() && go(&t[1..], rest),
            Some((c, rest)) => t.first().is_some_and(|x| x.eq_ignore_ascii_case(c)) && go(&t[1..], rest),
        }
    }
    let t: Vec<char> = text.chars().collect();
    let p: Vec<char> = pattern.chars().collect();
    go(&t, &p)
}

fn eval(p: &Cx, row: &[Value]) -> Value {
    match p {
        Cx::Col(i) => row[*i].clone(),
        Cx::Lit(v) => v.clone(),
        Cx::Bin(op, a, b) => {
            let x = eval(a, row);
            match op {
                BinaryOp::And => {
                    if truth(&x) == Some(false) {
                        return boolean(Some(false));
                    }
                    let y = eval(b, row);
                    match (truth(&x), truth(&y)) {
                        (_, Some(false)) => boolean(Some(false)),
                        (Some(true), Some(true)) => boolean(Some(true)),
                        _ => Value::Null,
                    }
                }
                BinaryOp::Or => {
                    if truth(&x) == Some(true) {
                        return boolean(Some(true));
                    }
                    let y = eval(b, row);
                    match (truth(&x), truth(&y)) {
                        (_, Some(true)) => boolean(Some(true)),
                        (Some(false), Some(false)) => boolean(Some(false)),
                        _ => Value::Null,
                    }
                }
                _ => {
                    let y = eval(b, row);
                    if x.is_null() || y.is_null() {
                        return Value::Null;
                    }
                    let o = x.cmp(&y);
                    match op {
                        BinaryOp::Eq => boolean(Some(o == Ordering::Equal)),
                        BinaryOp::NotEq => boolean(Some(o != Ordering::Equal)),
                        BinaryOp::Lt => boolean(Some(o == Ordering::Less)),
                        BinaryOp::LtEq => boolean(Some(o != Ordering::Greater)),
                        BinaryOp::Gt => boolean(Some(o == Ordering::Greater)),
                        BinaryOp::GtEq => boolean(Some(o != Ordering::Less)),
                        BinaryOp::Concat => Value::Text(format!("{x}{y}")),
                        _ => arith(*op, &x, &y),
                    }
                }
            }
        }
        Cx::Neg(a) => match numeric(&eval(a, row)) {
            Some(Value::Int(i)) => i.checked_neg().map(Value::Int).unwrap_or(Value::Real(-(i as f64))),
            Some(Value::Real(r)) => Value::Real(-r),
            _ => Value::Null,
        },
        Cx::Not(a) => boolean(truth(&eval(a, row)).map(|b| !b)),
        Cx::Case {
            operand,
            branches,
            otherwise,
        } => {
            let subject = operand.as_ref().map(|o| eval(o, row));
            for (w, t) in branches {
                let hit = match &subject {
                    Some(s) => {
                        let v = eval(w, row);
                        !s.is_null() && !v.is_null() && *s == v
                    }
                    None => eval(w, row).is_truthy(),
                };
                if hit {
                    return eval(t, row);
                }
            }
            otherwise.as_ref().map(|o| eval(o, row)).unwrap_or(Value::Null)
        }
        Cx::InList(e, list, negated) => {
            let v = eval(e, row);
            if v.is_null() {
                return Value::Null;
            }
            let mut saw_null = false;
            for x in list {
                let x = eval(x, row);
                if x.is_null() {
                    saw_null = true;
                } else if x == v {
                    return boolean(Some(!negated));
                }
            }
            if saw_null {
                Value::Null
            } else {
                boolean(Some(*negated))
            }
        }
        Cx::Between(e, lo, hi, negated) => {
            let (v, l, h) = (eval(e, row), eval(lo, row), eval(hi, row));
            if v.is_null() || l.is_null() || h.is_null() {
                return Value::Null;
            }
            boolean(Some((v >= l && v <= h) != *negated))
        }
        Cx::IsNull(e, negated) => boolean(Some(eval(e, row).is_null() != *negated)),
        Cx::Like(e, pat, negated) => match (eval(e, row), eval(pat, row)) {
            (Value::Text(t), Value::Text(p)) => boolean(Some(like(&t, &p) != *negated)),
            _ => Value::Null,
        },
        Cx::Func(name, args) => {
            let v: Vec<Value> = args.iter().map(|a| eval(a, row)).collect();
            scalar(name, &v)
        }
    }
}

fn scalar(name: &str, v: &[Value]) -> Value {
    let f = |i: usize| v.get(i).and_then(numeric).and_then(|x| x.as_f64());
    let real = |x: Option<f64>| x.map(Value::Real).unwrap_or(Value::Null);
    match name {
        "COALESCE" | "IFNULL" => v.iter().find(|x| !x.is_null()).cloned().unwrap_or(Value::Null),
        "NULLIF" => match (v.first(), v.get(1)) {
            (Some(a), Some(b)) if !a.is_null() && a == b => Value::Null,
            (Some(a), _) => a.clone(),
            _ => Value::Null,
        },
        "ABS" => match v.first().and_then(numeric) {
            Some(Value::Int(i)) => Value::Int(i.abs()),
            Some(Value::Real(r)) => Value::Real(r.abs()),
            _ => Value::Null,
        },
        "LOWER" | "UPPER" | "LENGTH" => match v.first() {
            Some(Value::Text(s)) => match name {
                "LOWER" => Value::Text(s.to_lowercase()),
                "UPPER" => Value::Text(s.to_uppercase()),
                _ => Value::Int(s.chars().count() as i64),
            },
            _ => Value::Null,
        },
        "ROUND" => {
            let digits = f(1).unwrap_or(0.0) as i32;
            real(f(0).map(|x| {
                let m = 10f64.powi(digits);
                (x * m).round() / m
            }))
        }
        "FLOOR" => real(f(0).map(f64::floor)),
        "CEIL" | "CEILING" => real(f(0).map(f64::ceil)),
        "SQRT" => real(f(0).filter(|x| *x >= 0.0).map(f64::sqrt)),
        "EXP" => real(f(0).map(f64::exp)),
        "LN" => real(f(0).filter(|x| *x > 0.0).map(f64::ln)),
        "POWER" => real(f(0).zip(f(1)).map(|(a, b)| a.powf(b))),
        "SIGN" => f(0).map(|x| Value::Int(if x > 0.0 { 1 } else if x < 0.0 { -1 } else { 0 })).unwrap_or(Value::Null),
        _ => Value::Null,
    }
}

/// Running state of one aggregate call over one group.
enum Acc {
    Count(i64),
    Sum { int: Option<i64>, real: f64, any_real: bool, any: bool, total: bool },
    Avg(f64, i64),
    Extreme(Option<Value>, bool),
    Distinct(HashSet<Value>, Box<Acc>),
}

impl Acc {
    fn new(name: &str, distinct: bool) -> Acc {
        let base = match name {
            "COUNT" => Acc::Count(0),
            "SUM" | "TOTAL" => Acc::Sum {
                int: Some(0),
                real: 0.0,
                any_real: false,
                any: false,
                total: name == "TOTAL",
            },
            "AVG" => Acc::Avg(0.0, 0),
            "MAX" => Acc::Extreme(None, true),
            _ => Acc::Extreme(None, false),
        };
        if distinct {
            Acc::Distinct(HashSet::new(), Box::new(base))
        } else {
            base
        }
    }

    /// `None` is `COUNT(*)`'s row marker.
    fn push(&mut self, v: Option<Value>) {
        match self {
            Acc::Distinct(seen, inner) => {
                if let Some(x) = &v {
                    if x.is_null() || !seen.insert(x.clone()) {
                        return;
                    }
                }
                inner.push(v);
            }
            Acc::Count(n) => {
                if v.is_none_or(|x| !x.is_null()) {
                    *n += 1;
                }
            }
            Acc::Sum {
                int,
                real,
                any_real,
                any,
                ..
            } => {
                if let Some(x) = v.as_ref().and_then(numeric) {
                    *any = true;
                    *real += x.as_f64().unwrap_or(0.0);
                    match x {
                        Value::Int(i) => *int = int.and_then(|s| s.checked_add(i)),
                        _ => *any_real = true,
                    }
                }
            }
            Acc::Avg(s, n) => {
                if let Some(x) = v.as_ref().and_then(numeric).and_then(|x| x.as_f64()) {
                    *s += x;
                    *n += 1;
                }
            }
            Acc::Extreme(best, max) => {
                if let Some(x) = v.filter(|x| !x.is_null()) {
                    let replace = match best {
                        None => true,
                        Some(b) => (x > *b) == *max && x != *b,
                    };
                    if replace {
                        *best = Some(x);
                    }
                }
            }
        }
    }

    fn finish(self) -> Value {
        match self {
            Acc::Distinct(_, inner) => inner.finish(),
            Acc::Count(n) => Value::Int(n),
            Acc::Sum {
                int,
                real,
                any_real,
                any,
                total,
            } => match (any, total, any_real, int) {
                (false, false, _, _) => Value::Null,
                (_, true, _, _) => Value::Real(real),
                (_, _, false, Some(i)) => Value::Int(i),
                _ => Value::Real(real),
            },
            Acc::Avg(s, n) => {
                if n == 0 {
                    Value::Null
                } else {
                    Value::Real(s / n as f64)
                }
            }
            Acc::Extreme(v, _) => v.unwrap_or(Value::Null),
        }
    }
}

fn finish(accs: Vec<Acc>) -> impl Iterator<Item = Value> {
    accs.into_iter().map(Acc::finish)
}

trait WalkAny {
    fn walk_any(&self, pred: &dyn Fn(&Expr) -> bool) -> bool;
}

impl WalkAny for Expr {
    fn walk_any(&self, pred: &dyn Fn(&Expr) -> bool) -> bool {
        let mut found = false;
        self.walk(&mut |x| found |= pred(x));
        found
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{ColumnSpec, DataType, TableSchema};

    fn adapter() -> MemoryAdapter {
        let mut a = MemoryAdapter::new();
        a.load_table(&TableData {
            schema: TableSchema {
                name: "t".into(),
                columns: vec![
                    ColumnSpec::new("u", DataType::Integer),
                    ColumnSpec::new("g", DataType::Text),
                    ColumnSpec::new("x", DataType::Real),
                ],
                privacy_unit: Some("u".into()),
                foreign_keys: vec![],
            },
            rows: vec![
                vec![1.into(), "a".into(), 5.0.into()],
                vec![1.into(), "a".into(), 1.0.into()],
                vec![2.into(), "b".into(), Value::Null],
                vec![3.into(), "a".into(), 2.5.into()],
            ],
        })
        .unwrap();
        a
    }

    fn run(sql: &str) -> Vec<Vec<Value>> {
        adapter().execute(sql).unwrap().rows
    }

    #[test]
    fn grouping_and_aggregates() {
        let r = run("SELECT g, COUNT(*) AS n, COUNT(x), SUM(x), MAX(x) FROM t GROUP BY g ORDER BY g");
        assert_eq!(
            r,
            vec![
                vec!["a".into(), 3.into(), 3.into(), 8.5.into(), 5.0.into()],
                vec!["b".into(), 1.into(), 0.into(), Value::Null, Value::Null],
            ]
        );
    }

    #[test]
    fn empty_aggregate_yields_one_row() {
        assert_eq!(run("SELECT COUNT(*), SUM(x) FROM t WHERE u > 10"), vec![vec![0.into(), Value::Null]]);
    }

    #[test]
    fn row_number_per_partition() {
        let r = run(
            "SELECT u, x, ROW_NUMBER() OVER (PARTITION BY u ORDER BY x) AS rn FROM t WHERE x IS NOT NULL ORDER BY u, rn",
        );
        assert_eq!(r[0], vec![1.into(), 1.0.into(), 1.into()]);
        assert_eq!(r[1], vec![1.into(), 5.0.into(), 2.into()]);
        assert_eq!(r[2], vec![3.into(), 2.5.into(), 1.into()]);
    }

    #[test]
    fn derived_tables_and_distinct() {
        let r = run("SELECT COUNT(*) FROM (SELECT DISTINCT u, g FROM t) AS d");
        assert_eq!(r, vec![vec![3.into()]]);
    }

    #[test]
    fn hash_join_with_cte() {
        let r = run(
            "WITH s AS (SELECT u AS v, g AS h FROM t WHERE x > 2) \
             SELECT t.u, s.h FROM t JOIN s ON t.u = s.v ORDER BY t.u, t.x",
        );
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], vec![3.into(), "a".into()]);
    }

    #[test]
    fn null_semantics_and_case() {
        let r = run("SELECT CASE WHEN x IS NULL THEN -1 WHEN x > 3 THEN 3 ELSE x END FROM t ORDER BY u, x");
        assert_eq!(r, vec![vec![1.0.into()], vec![3.into()], vec![(-1).into()], vec![2.5.into()]]);
    }

    #[test]
    fn integer_division_truncates() {
        assert_eq!(run("SELECT 7 / 2, 7.0 / 2, 1 / 0")[0], vec![3.into(), 3.5.into(), Value::Null]);
    }

    #[test]
    fn unknown_table_is_reported() {
        let e = adapter().execute("SELECT COUNT(*) FROM nosuch").unwrap_err();
        assert!(matches!(e, BackendError::Sql { ref code, .. } if code == "UNKNOWN_TABLE"), "{e}");
    }

    #[test]
    fn windows_can_be_disabled() {
        let mut a = MemoryAdapter::without_row_numbering();
        assert!(!a.capabilities().row_numbering);
        assert!(a.execute("SELECT ROW_NUMBER() OVER (ORDER BY 1)").is_err());
    }
}
