use super::ast::*;
use super::lexer::{tokenize, Token, TokenKind};
use super::SyntaxError;

const RESERVED: &[&str] = &[
    "ALL", "AND", "AS", "ASC", "BETWEEN", "BY", "CASE", "CROSS", "DESC", "DISTINCT", "ELSE", "END", "EXCEPT",
    "EXISTS", "FALSE", "FROM", "FULL", "GROUP", "HAVING", "IN", "INNER", "INTERSECT", "IS", "JOIN", "LEFT", "LIKE",
    "LIMIT", "NOT", "NULL", "ON", "OR", "ORDER", "OUTER", "OVER", "PARTITION", "RIGHT", "SELECT", "THEN", "TRUE",
    "UNION", "USING", "WHEN", "WHERE", "WITH",
];

pub(crate) fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(word))
}

/// Parses exactly one SELECT statement (optionally with a WITH clause and a
/// trailing semicolon).
pub fn parse_sql(text: &str) -> Result<Query, SyntaxError> {
    if text.trim().is_empty() {
        return Err(SyntaxError::new("empty query text", 0));
    }
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let first = p.peek().clone();
    if !(first.is_keyword("SELECT") || first.is_keyword("WITH")) {
        return Err(SyntaxError::new(
            format!("expected SELECT or WITH, found {}", describe(&first)),
            first.span.start,
        ));
    }
    let query = p.parse_query()?;
    p.eat(&TokenKind::Semicolon);
    let tail = p.peek().clone();
    if tail.kind != TokenKind::Eof {
        return Err(SyntaxError::new(
            format!("unexpected {} after end of statement", describe(&tail)),
            tail.span.start,
        ));
    }
    Ok(query)
}

fn describe(t: &Token) -> String {
    match &t.kind {
        TokenKind::Word(w) => format!("'{w}'"),
        TokenKind::QuotedIdent(w) => format!("\"{w}\""),
        TokenKind::Number(n) => format!("number {n}"),
        TokenKind::String(s) => format!("string '{s}'"),
        TokenKind::Eof => "end of input".to_string(),
        other => format!("{other:?}"),
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn peek_at(&self, n: usize) -> &Token {
        let i = (self.pos + n).min(self.tokens.len() - 1);
        &self.tokens[i]
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn prev_end(&self) -> usize {
        if self.pos == 0 {
            0
        } else {
            self.tokens[self.pos - 1].span.end
        }
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if &self.peek().kind == kind {
            self.advance();
            true
        } else {
            false
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.peek().is_keyword(kw) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn error_here(&self, expected: &str) -> SyntaxError {
        let t = self.peek();
        SyntaxError::new(format!("expected {expected}, found {}", describe(t)), t.span.start)
    }

    fn expect(&mut self, kind: &TokenKind, what: &str) -> Result<Token, SyntaxError> {
        if &self.peek().kind == kind {
            Ok(self.advance())
        } else {
            Err(self.error_here(what))
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<Token, SyntaxError> {
        if self.peek().is_keyword(kw) {
            Ok(self.advance())
        } else {
            Err(self.error_here(kw))
        }
    }

    fn parse_ident(&mut self) -> Result<String, SyntaxError> {
        match &self.peek().kind {
            TokenKind::Word(w) if !is_reserved(w) => {
                let w = w.to_ascii_lowercase();
                self.advance();
                Ok(w)
            }
            TokenKind::QuotedIdent(w) => {
                let w = w.clone();
                self.advance();
                Ok(w)
            }
            _ => Err(self.error_here("identifier")),
        }
    }

    fn parse_optional_alias(&mut self) -> Result<Option<String>, SyntaxError> {
        if self.eat_keyword("AS") {
            return self.parse_ident().map(Some);
        }
        match &self.peek().kind {
            TokenKind::Word(w) if !is_reserved(w) => self.parse_ident().map(Some),
            TokenKind::QuotedIdent(_) => self.parse_ident().map(Some),
            _ => Ok(None),
        }
    }

    fn parse_query(&mut self) -> Result<Query, SyntaxError> {
        let start = self.peek().span.start;
        let mut ctes = Vec::new();
        if self.eat_keyword("WITH") {
            loop {
                let cte_start = self.peek().span.start;
                let name = self.parse_ident()?;
                self.expect_keyword("AS")?;
                self.expect(&TokenKind::LParen, "'('")?;
                let query = self.parse_query()?;
                self.expect(&TokenKind::RParen, "')'")?;
                ctes.push(Cte {
                    name,
                    query: Box::new(query),
                    span: Span::new(cte_start, self.prev_end()),
                });
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let body = self.parse_set_expr()?;
        let mut order_by = Vec::new();
        if self.eat_keyword("ORDER") {
            self.expect_keyword("BY")?;
            order_by = self.parse_order_list()?;
        }
        let mut limit = None;
        if self.eat_keyword("LIMIT") {
            limit = Some(self.parse_expr()?);
        }
        Ok(Query {
            ctes,
            body,
            order_by,
            limit,
            span: Span::new(start, self.prev_end()),
        })
    }

    fn parse_order_list(&mut self) -> Result<Vec<OrderItem>, SyntaxError> {
        let mut out = Vec::new();
        loop {
            let expr = self.parse_expr()?;
            let desc = if self.eat_keyword("DESC") {
                true
            } else {
                self.eat_keyword("ASC");
                false
            };
            out.push(OrderItem { expr, desc });
            if !self.eat(&TokenKind::Comma) {
                return Ok(out);
            }
        }
    }

    fn parse_set_expr(&mut self) -> Result<SetExpr, SyntaxError> {
        let mut left = SetExpr::Select(Box::new(self.parse_select()?));
        loop {
            let op = if self.peek().is_keyword("UNION") {
                SetOperator::Union
            } else if self.peek().is_keyword("INTERSECT") {
                SetOperator::Intersect
            } else if self.peek().is_keyword("EXCEPT") {
                SetOperator::Except
            } else {
                return Ok(left);
            };
            self.advance();
            let all = self.eat_keyword("ALL");
            if !all {
                self.eat_keyword("DISTINCT");
            }
            let right = SetExpr::Select(Box::new(self.parse_select()?));
            let span = left.span().join(right.span());
            left = SetExpr::SetOperation {
                op,
                all,
                left: Box::new(left),
                right: Box::new(right),
                span,
            };
        }
    }

    fn parse_select(&mut self) -> Result<Select, SyntaxError> {
        let start = self.expect_keyword("SELECT")?.span.start;
        let distinct = if self.eat_keyword("DISTINCT") {
            true
        } else {
            self.eat_keyword("ALL");
            false
        };
        let mut items = Vec::new();
        loop {
            items.push(self.parse_select_item()?);
            if !self.eat(&TokenKind::Comma) {
                break;
            }
        }
        let mut from = Vec::new();
        if self.eat_keyword("FROM") {
            loop {
                from.push(self.parse_table_with_joins()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let selection = if self.eat_keyword("WHERE") {
            Some(self.parse_expr()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if self.eat_keyword("GROUP") {
            self.expect_keyword("BY")?;
            loop {
                group_by.push(self.parse_expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
        }
        let having = if self.eat_keyword("HAVING") {
            Some(self.parse_expr()?)
        } else {
            None
        };
        Ok(Select {
            distinct,
            items,
            from,
            selection,
            group_by,
            having,
            span: Span::new(start, self.prev_end()),
        })
    }

    fn parse_select_item(&mut self) -> Result<SelectItem, SyntaxError> {
        let start = self.peek().span.start;
        if self.peek().kind == TokenKind::Star {
            self.advance();
            return Ok(SelectItem::Wildcard(Span::new(start, self.prev_end())));
        }
        let is_word = matches!(&self.peek().kind, TokenKind::Word(w) if !is_reserved(w))
            || matches!(self.peek().kind, TokenKind::QuotedIdent(_));
        if is_word && self.peek_at(1).kind == TokenKind::Dot && self.peek_at(2).kind == TokenKind::Star {
            let q = self.parse_ident()?;
            self.advance();
            self.advance();
            return Ok(SelectItem::QualifiedWildcard(q, Span::new(start, self.prev_end())));
        }
        let expr = self.parse_expr()?;
        let alias = self.parse_optional_alias()?;
        Ok(SelectItem::Expr {
            expr,
            alias,
            span: Span::new(start, self.prev_end()),
        })
    }

    fn parse_table_factor(&mut self) -> Result<TableFactor, SyntaxError> {
        let start = self.peek().span.start;
        if self.eat(&TokenKind::LParen) {
            if !(self.peek().is_keyword("SELECT") || self.peek().is_keyword("WITH")) {
                return Err(self.error_here("subquery"));
            }
            let q = self.parse_query()?;
            self.expect(&TokenKind::RParen, "')'")?;
            let alias = self.parse_optional_alias()?;
            return Ok(TableFactor::Derived {
                subquery: Box::new(q),
                alias,
                span: Span::new(start, self.prev_end()),
            });
        }
        let name = self.parse_ident()?;
        let alias = self.parse_optional_alias()?;
        Ok(TableFactor::Table {
            name,
            alias,
            span: Span::new(start, self.prev_end()),
        })
    }

    fn parse_table_with_joins(&mut self) -> Result<TableWithJoins, SyntaxError> {
        let relation = self.parse_table_factor()?;
        let mut joins = Vec::new();
        loop {
            let start = self.peek().span.start;
            let kind = if self.eat_keyword("JOIN") {
                JoinKind::Inner
            } else if self.eat_keyword("INNER") {
                self.expect_keyword("JOIN")?;
                JoinKind::Inner
            } else if self.eat_keyword("CROSS") {
                self.expect_keyword("JOIN")?;
                JoinKind::Cross
            } else if self.peek().is_keyword("LEFT") || self.peek().is_keyword("RIGHT") || self.peek().is_keyword("FULL")
            {
                let kind = if self.eat_keyword("LEFT") {
                    JoinKind::Left
                } else if self.eat_keyword("RIGHT") {
                    JoinKind::Right
                } else {
                    self.advance();
                    JoinKind::Full
                };
                self.eat_keyword("OUTER");
                self.expect_keyword("JOIN")?;
                kind
            } else {
                return Ok(TableWithJoins { relation, joins });
            };
            let rel = self.parse_table_factor()?;
            let on = if kind == JoinKind::Cross {
                None
            } else if self.peek().is_keyword("USING") {
                return Err(SyntaxError::new(
                    "JOIN ... USING is not supported; write an explicit ON predicate",
                    self.peek().span.start,
                ));
            } else {
                self.expect_keyword("ON")?;
                Some(self.parse_expr()?)
            };
            joins.push(Join {
                kind,
                relation: rel,
                on,
                span: Span::new(start, self.prev_end()),
            });
        }
    }

    pub fn parse_expr(&mut self) -> Result<Expr, SyntaxError> {
        self.parse_or()
    }

    fn parse_or(&mut self) -> Result<Expr, SyntaxError> {
        let mut left = self.parse_and()?;
        while self.eat_keyword("OR") {
            let right = self.parse_and()?;
            left = binary(BinaryOp::Or, left, right);
        }
        Ok(left)
    }

    fn parse_and(&mut self) -> Result<Expr, SyntaxError> {
        let mut left = self.parse_not()?;
        while self.eat_keyword("AND") {
            let right = self.parse_not()?;
            left = binary(BinaryOp::And, left, right);
        }
        Ok(left)
    }

    fn parse_not(&mut self) -> Result<Expr, SyntaxError> {
        let start = self.peek().span.start;
        if self.peek().is_keyword("NOT") && !self.peek_at(1).is_keyword("EXISTS") {
            self.advance();
            let inner = self.parse_not()?;
            let span = Span::new(start, inner.span.end);
            return Ok(Expr::new(
                ExprKind::Unary {
                    op: UnaryOp::Not,
                    expr: Box::new(inner),
                },
                span,
            ));
        }
        self.parse_comparison()
    }

    fn parse_comparison(&mut self) -> Result<Expr, SyntaxError> {
        let left = self.parse_additive()?;
        let op = match self.peek().kind {
            TokenKind::Eq => Some(BinaryOp::Eq),
            TokenKind::NotEq => Some(BinaryOp::NotEq),
            TokenKind::Lt => Some(BinaryOp::Lt),
            TokenKind::LtEq => Some(BinaryOp::LtEq),
            TokenKind::Gt => Some(BinaryOp::Gt),
            TokenKind::GtEq => Some(BinaryOp::GtEq),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let right = self.parse_additive()?;
            return Ok(binary(op, left, right));
        }
        let start = left.span.start;
        if self.eat_keyword("IS") {
            let negated = self.eat_keyword("NOT");
            self.expect_keyword("NULL")?;
            return Ok(Expr::new(
                ExprKind::IsNull {
                    expr: Box::new(left),
                    negated,
                },
                Span::new(start, self.prev_end()),
            ));
        }
        let negated = if self.peek().is_keyword("NOT")
            && (self.peek_at(1).is_keyword("IN") || self.peek_at(1).is_keyword("BETWEEN") || self.peek_at(1).is_keyword("LIKE"))
        {
            self.advance();
            true
        } else {
            false
        };
        if self.eat_keyword("IN") {
            self.expect(&TokenKind::LParen, "'('")?;
            if self.peek().is_keyword("SELECT") || self.peek().is_keyword("WITH") {
                let q = self.parse_query()?;
                self.expect(&TokenKind::RParen, "')'")?;
                return Ok(Expr::new(
                    ExprKind::InSubquery {
                        expr: Box::new(left),
                        subquery: Box::new(q),
                        negated,
                    },
                    Span::new(start, self.prev_end()),
                ));
            }
            let mut list = Vec::new();
            loop {
                list.push(self.parse_expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            self.expect(&TokenKind::RParen, "')'")?;
            return Ok(Expr::new(
                ExprKind::InList {
                    expr: Box::new(left),
                    list,
                    negated,
                },
                Span::new(start, self.prev_end()),
            ));
        }
        if self.eat_keyword("BETWEEN") {
            let low = self.parse_additive()?;
            self.expect_keyword("AND")?;
            let high = self.parse_additive()?;
            return Ok(Expr::new(
                ExprKind::Between {
                    expr: Box::new(left),
                    low: Box::new(low),
                    high: Box::new(high),
                    negated,
                },
                Span::new(start, self.prev_end()),
            ));
        }
        if self.eat_keyword("LIKE") {
            let pattern = self.parse_additive()?;
            return Ok(Expr::new(
                ExprKind::Like {
                    expr: Box::new(left),
                    pattern: Box::new(pattern),
                    negated,
                },
                Span::new(start, self.prev_end()),
            ));
        }
        if negated {
            return Err(self.error_here("IN, BETWEEN or LIKE"));
        }
        Ok(left)
    }

    fn parse_additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut left = self.parse_multiplicative()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Plus => BinaryOp::Plus,
                TokenKind::Minus => BinaryOp::Minus,
                TokenKind::Concat => BinaryOp::Concat,
                _ => return Ok(left),
            };
            self.advance();
            let right = self.parse_multiplicative()?;
            left = binary(op, left, right);
        }
    }

    fn parse_multiplicative(&mut self) -> Result<Expr, SyntaxError> {
        let mut left = self.parse_unary()?;
        loop {
            let op = match self.peek().kind {
                TokenKind::Star => BinaryOp::Multiply,
                TokenKind::Slash => BinaryOp::Divide,
                TokenKind::Percent => BinaryOp::Modulo,
                _ => return Ok(left),
            };
            self.advance();
            let right = self.parse_unary()?;
            left = binary(op, left, right);
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, SyntaxError> {
        let start = self.peek().span.start;
        if self.eat(&TokenKind::Minus) {
            let inner = self.parse_unary()?;
            let span = Span::new(start, inner.span.end);
            return Ok(Expr::new(
                ExprKind::Unary {
                    op: UnaryOp::Neg,
                    expr: Box::new(inner),
                },
                span,
            ));
        }
        if self.eat(&TokenKind::Plus) {
            return self.parse_unary();
        }
        self.parse_primary()
    }

    fn parse_primary(&mut self) -> Result<Expr, SyntaxError> {
        let tok = self.peek().clone();
        let start = tok.span.start;
        match &tok.kind {
            TokenKind::Number(n) => {
                self.advance();
                let lit = if n.contains(['.', 'e', 'E']) {
                    Literal::Real(n.parse().map_err(|_| SyntaxError::new("malformed number", start))?)
                } else {
                    match n.parse::<i64>() {
                        Ok(i) => Literal::Integer(i),
                        Err(_) => Literal::Real(n.parse().map_err(|_| SyntaxError::new("malformed number", start))?),
                    }
                };
                Ok(Expr::new(ExprKind::Literal(lit), tok.span))
            }
            TokenKind::String(s) => {
                self.advance();
                Ok(Expr::new(ExprKind::Literal(Literal::String(s.clone())), tok.span))
            }
            TokenKind::LParen => {
                self.advance();
                if self.peek().is_keyword("SELECT") || self.peek().is_keyword("WITH") {
                    let q = self.parse_query()?;
                    self.expect(&TokenKind::RParen, "')'")?;
                    return Ok(Expr::new(ExprKind::Subquery(Box::new(q)), Span::new(start, self.prev_end())));
                }
                let mut inner = self.parse_expr()?;
                self.expect(&TokenKind::RParen, "')'")?;
                inner.span = Span::new(start, self.prev_end());
                Ok(inner)
            }
            TokenKind::Word(w) if w.eq_ignore_ascii_case("NULL") => {
                self.advance();
                Ok(Expr::new(ExprKind::Literal(Literal::Null), tok.span))
            }
            TokenKind::Word(w) if w.eq_ignore_ascii_case("TRUE") || w.eq_ignore_ascii_case("FALSE") => {
                self.advance();
                Ok(Expr::new(
                    ExprKind::Literal(Literal::Boolean(w.eq_ignore_ascii_case("TRUE"))),
                    tok.span,
                ))
            }
            TokenKind::Word(w) if w.eq_ignore_ascii_case("CASE") => {
                self.advance();
                self.parse_case(start)
            }
            TokenKind::Word(w) if w.eq_ignore_ascii_case("EXISTS") || w.eq_ignore_ascii_case("NOT") => {
                let negated = self.eat_keyword("NOT");
                self.expect_keyword("EXISTS")?;
                self.expect(&TokenKind::LParen, "'('")?;
                let q = self.parse_query()?;
                self.expect(&TokenKind::RParen, "')'")?;
                Ok(Expr::new(
                    ExprKind::Exists {
                        subquery: Box::new(q),
                        negated,
                    },
                    Span::new(start, self.prev_end()),
                ))
            }
            TokenKind::Word(w) if !is_reserved(w) => {
                if self.peek_at(1).kind == TokenKind::LParen {
                    let name = w.to_ascii_uppercase();
                    self.advance();
                    self.advance();
                    return self.parse_function(name, start);
                }
                self.parse_column_ref(start)
            }
            TokenKind::QuotedIdent(_) => self.parse_column_ref(start),
            _ => Err(self.error_here("expression")),
        }
    }

    fn parse_column_ref(&mut self, start: usize) -> Result<Expr, SyntaxError> {
        let first = self.parse_ident()?;
        if self.eat(&TokenKind::Dot) {
            let name = self.parse_ident()?;
            return Ok(Expr::new(
                ExprKind::Column {
                    qualifier: Some(first),
                    name,
                },
                Span::new(start, self.prev_end()),
            ));
        }
        Ok(Expr::new(
            ExprKind::Column {
                qualifier: None,
                name: first,
            },
            Span::new(start, self.prev_end()),
        ))
    }

    fn parse_function(&mut self, name: String, start: usize) -> Result<Expr, SyntaxError> {
        let mut distinct = false;
        let args = if self.eat(&TokenKind::Star) {
            FunctionArgs::Star
        } else if self.peek().kind == TokenKind::RParen {
            FunctionArgs::List(Vec::new())
        } else {
            distinct = self.eat_keyword("DISTINCT");
            let mut list = Vec::new();
            loop {
                list.push(self.parse_expr()?);
                if !self.eat(&TokenKind::Comma) {
                    break;
                }
            }
            FunctionArgs::List(list)
        };
        self.expect(&TokenKind::RParen, "')'")?;
        let mut over = None;
        if self.eat_keyword("OVER") {
            self.expect(&TokenKind::LParen, "'('")?;
            let mut partition_by = Vec::new();
            let mut order_by = Vec::new();
            if self.eat_keyword("PARTITION") {
                self.expect_keyword("BY")?;
                loop {
                    partition_by.push(self.parse_expr()?);
                    if !self.eat(&TokenKind::Comma) {
                        break;
                    }
                }
            }
            if self.eat_keyword("ORDER") {
                self.expect_keyword("BY")?;
                order_by = self.parse_order_list()?;
            }
            self.expect(&TokenKind::RParen, "')'")?;
            over = Some(WindowSpec { partition_by, order_by });
        }
        Ok(Expr::new(
            ExprKind::Function {
                name,
                args,
                distinct,
                over,
            },
            Span::new(start, self.prev_end()),
        ))
    }

    fn parse_case(&mut self, start: usize) -> Result<Expr, SyntaxError> {
        let operand = if self.peek().is_keyword("WHEN") {
            None
        } else {
            Some(Box::new(self.parse_expr()?))
        };
        let mut branches = Vec::new();
        while self.eat_keyword("WHEN") {
            let cond = self.parse_expr()?;
            self.expect_keyword("THEN")?;
            let result = self.parse_expr()?;
            branches.push((cond, result));
        }
        if branches.is_empty() {
            return Err(self.error_here("WHEN"));
        }
        let else_result = if self.eat_keyword("ELSE") {
            Some(Box::new(self.parse_expr()?))
        } else {
            None
        };
        self.expect_keyword("END")?;
        Ok(Expr::new(
            ExprKind::Case {
                operand,
                branches,
                else_result,
            },
            Span::new(start, self.prev_end()),
        ))
    }
}

fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
    let span = left.span.join(right.span);
    Expr::new(
        ExprKind::Binary {
            op,
            left: Box::new(left),
            right: Box::new(right),
        },
        span,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn select(q: &Query) -> &Select {
        match &q.body {
            SetExpr::Select(s) => s,
            _ => panic!("not a select"),
        }
    }

    #[test]
    fn count_star_has_one_aggregate() {
        let q = parse_sql("SELECT COUNT(*) FROM customer").unwrap();
        let s = select(&q);
        assert_eq!(s.items.len(), 1);
        match &s.items[0] {
            SelectItem::Expr { expr, .. } => assert!(matches!(
                &expr.kind,
                ExprKind::Function { name, args: FunctionArgs::Star, .. } if name == "COUNT"
            )),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn group_key_is_recorded() {
        let q = parse_sql("SELECT AVG(o_totalprice) FROM orders GROUP BY o_orderstatus").unwrap();
        assert_eq!(select(&q).group_by.len(), 1);
    }

    #[test]
    fn misspelled_keyword_fails_at_offset_zero() {
        let err = parse_sql("SELEC COUNT(*)").unwrap_err();
        assert_eq!(err.offset, 0);
    }

    #[test]
    fn precedence_and_over_clause() {
        let q = parse_sql(
            "SELECT a + b * 2 AS x, ROW_NUMBER() OVER (PARTITION BY u ORDER BY v DESC) rn FROM t WHERE a = 1 OR b = 2 AND c = 3",
        )
        .unwrap();
        let s = select(&q);
        let rendered = s.items[0].to_string();
        assert_eq!(rendered, "(a + (b * 2)) AS x");
        assert_eq!(
            s.items[1].to_string(),
            "ROW_NUMBER() OVER (PARTITION BY u ORDER BY v DESC) AS rn"
        );
        assert_eq!(
            s.selection.as_ref().unwrap().to_string(),
            "((a = 1) OR ((b = 2) AND (c = 3)))"
        );
    }

    #[test]
    fn ctes_joins_and_trailing_semicolon() {
        let q = parse_sql(
            "WITH t AS (SELECT * FROM customer) SELECT COUNT(*) FROM t JOIN orders o ON t.c_custkey = o.o_custkey;",
        )
        .unwrap();
        assert_eq!(q.ctes.len(), 1);
        assert_eq!(select(&q).from[0].joins.len(), 1);
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let err = parse_sql("SELECT 1 FROM t garbage more").unwrap_err();
        assert_eq!(err.offset, 24);
    }

    #[test]
    fn non_select_statement_rejected() {
        assert!(parse_sql("DELETE FROM customer").is_err());
        assert!(parse_sql("   ").is_err());
    }

    #[test]
    fn rendering_reparses_to_same_text() {
        let text = "WITH x AS (SELECT a, b FROM t WHERE b IN (1, 2) AND c BETWEEN 1 AND 5) \
                    SELECT k, SUM(CASE WHEN a < 0 THEN 0 ELSE a END) AS s FROM x JOIN y ON x.a = y.b \
                    WHERE z IS NOT NULL AND w NOT LIKE 'a%' GROUP BY k HAVING COUNT(*) > 1 ORDER BY k DESC LIMIT 5";
        let q = parse_sql(text).unwrap();
        let once = q.to_string();
        let twice = parse_sql(&once).unwrap().to_string();
        assert_eq!(once, twice);
    }
}
