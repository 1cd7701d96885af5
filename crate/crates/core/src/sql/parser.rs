//! Recursive-descent parser for the Spider SELECT subset.

use super::ast::*;
use super::lexer::{SqlToken, TokenKind};
use super::SqlError;
use crate::schema::normalize_identifier;

const AGGREGATES: &[&str] = &["count", "sum", "avg", "min", "max"];
const SCALAR_FUNCTIONS: &[&str] = &[
    "abs",
    "lower",
    "upper",
    "length",
    "round",
    "coalesce",
    "ifnull",
    "substr",
    "trim",
    "strftime",
    "julianday",
    "date",
];

/// Parses a complete query. Trailing tokens other than a single `;` are a
/// syntax error.
pub fn parse_select(tokens: &[SqlToken]) -> Result<SelectAst, SqlError> {
    if tokens.is_empty() {
        return Err(SqlError::Empty);
    }
    let mut p = Parser { tokens, pos: 0 };
    let ast = p.query()?;
    if p.peek().is_some_and(|t| t.is_punct(";")) {
        p.pos += 1;
    }
    if let Some(t) = p.peek() {
        return Err(p.syntax("end of query", Some(t)));
    }
    Ok(ast)
}

struct Parser<'a> {
    tokens: &'a [SqlToken],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a SqlToken> {
        self.tokens.get(self.pos)
    }

    fn peek_at(&self, ahead: usize) -> Option<&'a SqlToken> {
        self.tokens.get(self.pos + ahead)
    }

    fn next(&mut self) -> Option<&'a SqlToken> {
        let t = self.tokens.get(self.pos);
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn end_offset(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.position + t.text.len())
            .unwrap_or(0)
    }

    fn syntax(&self, expected: &str, found: Option<&SqlToken>) -> SqlError {
        match found {
            Some(t) => SqlError::Syntax {
                expected: expected.to_string(),
                found: t.text.clone(),
                offset: t.position,
            },
            None => SqlError::Syntax {
                expected: expected.to_string(),
                found: "end of input".to_string(),
                offset: self.end_offset(),
            },
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        self.peek().is_some_and(|t| t.is_keyword(kw))
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if self.at_keyword(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_keyword(kw) {
            Ok(())
        } else {
            Err(self.syntax(&kw.to_uppercase(), self.peek()))
        }
    }

    fn at_punct(&self, p: &str) -> bool {
        self.peek().is_some_and(|t| t.is_punct(p))
    }

    fn eat_punct(&mut self, p: &str) -> bool {
        if self.at_punct(p) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_punct(&mut self, p: &str) -> Result<(), SqlError> {
        if self.eat_punct(p) {
            Ok(())
        } else {
            Err(self.syntax(&format!("'{p}'"), self.peek()))
        }
    }

    fn unsupported(&self, construct: &str, t: &SqlToken) -> SqlError {
        SqlError::Unsupported {
            construct: construct.to_string(),
            offset: t.position,
        }
    }

    fn ident(&mut self) -> Result<Ident, SqlError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::Identifier => {
                self.pos += 1;
                to_ident(t)
            }
            other => Err(self.syntax("identifier", other)),
        }
    }

    fn query(&mut self) -> Result<SelectAst, SqlError> {
        if let Some(t) = self.peek() {
            for kw in ["with", "insert", "update", "delete", "create", "drop"] {
                if t.is_keyword(kw) {
                    return Err(self.unsupported(&format!("{} statement", kw.to_uppercase()), t));
                }
            }
        }
        self.expect_keyword("select")?;
        let distinct = self.eat_keyword("distinct");
        if !distinct {
            self.eat_keyword("all");
        }
        let items = self.select_items()?;
        let from = if self.eat_keyword("from") {
            Some(self.parse_from()?)
        } else {
            None
        };
        let where_clause = if self.eat_keyword("where") {
            Some(self.expr()?)
        } else {
            None
        };
        let mut group_by = Vec::new();
        if self.eat_keyword("group") {
            self.expect_keyword("by")?;
            group_by = self.expr_list()?;
        }
        let having = if self.eat_keyword("having") {
            Some(self.expr()?)
        } else {
            None
        };
        let mut order_by = Vec::new();
        if self.eat_keyword("order") {
            self.expect_keyword("by")?;
            loop {
                let expr = self.expr()?;
                let descending = if self.eat_keyword("desc") {
                    true
                } else {
                    self.eat_keyword("asc");
                    false
                };
                order_by.push(OrderItem { expr, descending });
                if !self.eat_punct(",") {
                    break;
                }
            }
        }
        let mut limit = None;
        let mut offset = None;
        if self.eat_keyword("limit") {
            limit = Some(self.expr()?);
            if self.eat_keyword("offset") {
                offset = Some(self.expr()?);
            } else if self.eat_punct(",") {
                // `LIMIT offset, count`
                offset = limit.take();
                limit = Some(self.expr()?);
            }
        }
        let set_op = self.set_operation()?;
        Ok(SelectAst {
            distinct,
            items,
            from,
            where_clause,
            group_by,
            having,
            order_by,
            limit,
            offset,
            set_op,
        })
    }

    fn set_operation(&mut self) -> Result<Option<SetOperation>, SqlError> {
        let op = if self.eat_keyword("union") {
            SetOp::Union
        } else if self.eat_keyword("intersect") {
            SetOp::Intersect
        } else if self.eat_keyword("except") {
            SetOp::Except
        } else {
            return Ok(None);
        };
        let all = self.eat_keyword("all");
        let right = if self.at_punct("(") && self.peek_at(1).is_some_and(|t| t.is_keyword("select"))
        {
            self.pos += 1;
            let q = self.query()?;
            self.expect_punct(")")?;
            q
        } else {
            self.query()?
        };
        Ok(Some(SetOperation {
            op,
            all,
            right: Box::new(right),
        }))
    }

    fn select_items(&mut self) -> Result<Vec<SelectItem>, SqlError> {
        let mut items = Vec::new();
        loop {
            if self.peek().is_some_and(|t| t.kind == TokenKind::Star) {
                self.pos += 1;
                items.push(SelectItem::Wildcard);
            } else if self.peek().is_some_and(|t| t.kind == TokenKind::Identifier)
                && self.peek_at(1).is_some_and(|t| t.is_punct("."))
                && self.peek_at(2).is_some_and(|t| t.kind == TokenKind::Star)
            {
                let q = self.ident()?;
                self.pos += 2;
                items.push(SelectItem::QualifiedWildcard(q));
            } else {
                let expr = self.expr()?;
                let alias = self.alias()?;
                items.push(SelectItem::Expr { expr, alias });
            }
            if !self.eat_punct(",") {
                break;
            }
        }
        Ok(items)
    }

    fn alias(&mut self) -> Result<Option<Ident>, SqlError> {
        if self.eat_keyword("as") {
            return match self.peek() {
                Some(t) if matches!(t.kind, TokenKind::Identifier | TokenKind::String) => {
                    self.pos += 1;
                    to_ident(t).map(Some)
                }
                other => Err(self.syntax("alias", other)),
            };
        }
        if self.peek().is_some_and(|t| t.kind == TokenKind::Identifier) {
            return self.ident().map(Some);
        }
        Ok(None)
    }

    fn parse_from(&mut self) -> Result<FromClause, SqlError> {
        let first = self.table_source()?;
        let mut joins = Vec::new();
        loop {
            let kind = if self.eat_punct(",") {
                JoinKind::Comma
            } else if let Some(kind) = self.join_keyword()? {
                kind
            } else {
                break;
            };
            let source = self.table_source()?;
            let on = if self.eat_keyword("on") {
                Some(self.expr()?)
            } else {
                if let Some(t) = self.peek().filter(|t| t.is_keyword("using")) {
                    return Err(self.unsupported("JOIN ... USING", t));
                }
                None
            };
            joins.push(Join { kind, source, on });
        }
        Ok(FromClause { first, joins })
    }

    fn join_keyword(&mut self) -> Result<Option<JoinKind>, SqlError> {
        let Some(t) = self.peek() else {
            return Ok(None);
        };
        if t.is_keyword("natural") {
            return Err(self.unsupported("NATURAL JOIN", t));
        }
        let kind = if t.is_keyword("join") {
            self.pos += 1;
            return Ok(Some(JoinKind::Inner));
        } else if t.is_keyword("inner") {
            JoinKind::Inner
        } else if t.is_keyword("left") {
            JoinKind::Left
        } else if t.is_keyword("right") {
            JoinKind::Right
        } else if t.is_keyword("full") {
            JoinKind::Full
        } else if t.is_keyword("cross") {
            JoinKind::Cross
        } else {
            return Ok(None);
        };
        self.pos += 1;
        if matches!(kind, JoinKind::Left | JoinKind::Right | JoinKind::Full) {
            self.eat_keyword("outer");
        }
        self.expect_keyword("join")?;
        Ok(Some(kind))
    }

    fn table_source(&mut self) -> Result<TableSource, SqlError> {
        if self.at_punct("(") {
            let open = self.next();
            if !self.at_keyword("select") {
                return Err(self.unsupported("parenthesized join", open.expect("peeked")));
            }
            let query = self.query()?;
            self.expect_punct(")")?;
            let alias = self.alias()?;
            return Ok(TableSource::Derived {
                query: Box::new(query),
                alias,
            });
        }
        let name = self.ident()?;
        let alias = self.alias()?;
        Ok(TableSource::Table { name, alias })
    }

    fn expr_list(&mut self) -> Result<Vec<Expr>, SqlError> {
        let mut list = vec![self.expr()?];
        while self.eat_punct(",") {
            list.push(self.expr()?);
        }
        Ok(list)
    }

    fn expr(&mut self) -> Result<Expr, SqlError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.and_expr()?;
        while self.eat_keyword("or") {
            let right = self.and_expr()?;
            left = binary(BinaryOp::Or, left, right);
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.not_expr()?;
        while self.eat_keyword("and") {
            let right = self.not_expr()?;
            left = binary(BinaryOp::And, left, right);
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, SqlError> {
        if self.at_keyword("not") && !self.peek_at(1).is_some_and(|t| t.is_keyword("exists")) {
            self.pos += 1;
            let expr = self.not_expr()?;
            return Ok(Expr::Unary {
                op: UnaryOp::Not,
                expr: Box::new(expr),
            });
        }
        self.comparison()
    }

    fn comparison(&mut self) -> Result<Expr, SqlError> {
        let left = self.additive()?;
        let Some(t) = self.peek() else {
            return Ok(left);
        };
        if t.kind == TokenKind::Operator {
            let op = match t.text.as_str() {
                "=" | "==" => Some(BinaryOp::Eq),
                "!=" | "<>" => Some(BinaryOp::NotEq),
                "<" => Some(BinaryOp::Lt),
                "<=" => Some(BinaryOp::LtEq),
                ">" => Some(BinaryOp::Gt),
                ">=" => Some(BinaryOp::GtEq),
                _ => None,
            };
            if let Some(op) = op {
                self.pos += 1;
                let right = self.additive()?;
                return Ok(binary(op, left, right));
            }
            return Ok(left);
        }
        if t.is_keyword("is") {
            self.pos += 1;
            let negated = self.eat_keyword("not");
            self.expect_keyword("null")?;
            return Ok(Expr::IsNull {
                expr: Box::new(left),
                negated,
            });
        }
        let negated = if t.is_keyword("not")
            && self.peek_at(1).is_some_and(|n| {
                n.is_keyword("in") || n.is_keyword("between") || n.is_keyword("like")
            }) {
            self.pos += 1;
            true
        } else {
            false
        };
        if self.eat_keyword("between") {
            let low = self.additive()?;
            self.expect_keyword("and")?;
            let high = self.additive()?;
            return Ok(Expr::Between {
                expr: Box::new(left),
                low: Box::new(low),
                high: Box::new(high),
                negated,
            });
        }
        if self.eat_keyword("like") {
            let pattern = self.additive()?;
            return Ok(Expr::Like {
                expr: Box::new(left),
                pattern: Box::new(pattern),
                negated,
            });
        }
        if self.eat_keyword("in") {
            self.expect_punct("(")?;
            if self.at_keyword("select") {
                let query = self.query()?;
                self.expect_punct(")")?;
                return Ok(Expr::InSubquery {
                    expr: Box::new(left),
                    query: Box::new(query),
                    negated,
                });
            }
            let list = self.expr_list()?;
            self.expect_punct(")")?;
            return Ok(Expr::InList {
                expr: Box::new(left),
                list,
                negated,
            });
        }
        if let Some(t) = self.peek().filter(|t| t.is_keyword("glob")) {
            return Err(self.unsupported("GLOB", t));
        }
        Ok(left)
    }

    fn additive(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Some(t) if t.kind == TokenKind::Operator && t.text == "+" => BinaryOp::Plus,
                Some(t) if t.kind == TokenKind::Operator && t.text == "-" => BinaryOp::Minus,
                Some(t) if t.kind == TokenKind::Operator && t.text == "||" => BinaryOp::Concat,
                _ => break,
            };
            self.pos += 1;
            let right = self.multiplicative()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn multiplicative(&mut self) -> Result<Expr, SqlError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(t) if t.kind == TokenKind::Star => BinaryOp::Mul,
                Some(t) if t.kind == TokenKind::Operator && t.text == "/" => BinaryOp::Div,
                Some(t) if t.kind == TokenKind::Operator && t.text == "%" => BinaryOp::Mod,
                _ => break,
            };
            self.pos += 1;
            let right = self.unary()?;
            left = binary(op, left, right);
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expr, SqlError> {
        let op = match self.peek() {
            Some(t) if t.kind == TokenKind::Operator && t.text == "-" => UnaryOp::Neg,
            Some(t) if t.kind == TokenKind::Operator && t.text == "+" => UnaryOp::Plus,
            _ => return self.primary(),
        };
        self.pos += 1;
        let expr = self.unary()?;
        Ok(Expr::Unary {
            op,
            expr: Box::new(expr),
        })
    }

    fn primary(&mut self) -> Result<Expr, SqlError> {
        let Some(t) = self.peek() else {
            return Err(self.syntax("expression", None));
        };
        match t.kind {
            TokenKind::Number => {
                self.pos += 1;
                Ok(Expr::Number(t.text.clone()))
            }
            TokenKind::String => {
                self.pos += 1;
                let inner = &t.text[1..t.text.len() - 1];
                Ok(Expr::Str(inner.replace("''", "'")))
            }
            TokenKind::Star => Err(self.syntax("expression", Some(t))),
            TokenKind::Keyword => {
                if t.is_keyword("null") {
                    self.pos += 1;
                    Ok(Expr::Null)
                } else if t.is_keyword("exists") || t.is_keyword("not") {
                    let negated = self.eat_keyword("not");
                    self.expect_keyword("exists")?;
                    self.expect_punct("(")?;
                    let query = self.query()?;
                    self.expect_punct(")")?;
                    Ok(Expr::Exists {
                        query: Box::new(query),
                        negated,
                    })
                } else if t.is_keyword("case") {
                    Err(self.unsupported("CASE expression", t))
                } else if t.is_keyword("cast") {
                    Err(self.unsupported("CAST expression", t))
                } else {
                    Err(self.syntax("expression", Some(t)))
                }
            }
            TokenKind::Punctuation if t.text == "(" => {
                self.pos += 1;
                if self.at_keyword("select") {
                    let query = self.query()?;
                    self.expect_punct(")")?;
                    return Ok(Expr::Subquery(Box::new(query)));
                }
                let inner = self.expr()?;
                if let Some(c) = self.peek().filter(|c| c.is_punct(",")) {
                    return Err(self.unsupported("row value", c));
                }
                self.expect_punct(")")?;
                Ok(inner)
            }
            TokenKind::Identifier => {
                if self.peek_at(1).is_some_and(|n| n.is_punct("(")) && !t.is_double_quoted() {
                    return self.function_call();
                }
                let first = self.ident()?;
                if self.eat_punct(".") {
                    let name = self.ident()?;
                    return Ok(Expr::Column {
                        qualifier: Some(first),
                        name,
                    });
                }
                Ok(Expr::Column {
                    qualifier: None,
                    name: first,
                })
            }
            _ => Err(self.syntax("expression", Some(t))),
        }
    }

    fn function_call(&mut self) -> Result<Expr, SqlError> {
        let t = self.next().expect("peeked identifier");
        let name = t.text.to_lowercase();
        let aggregate = AGGREGATES.contains(&name.as_str());
        if !aggregate && !SCALAR_FUNCTIONS.contains(&name.as_str()) {
            return Err(self.unsupported(&format!("function {name}()"), t));
        }
        self.expect_punct("(")?;
        let distinct = self.eat_keyword("distinct");
        let mut args = Vec::new();
        if self.peek().is_some_and(|s| s.kind == TokenKind::Star) {
            self.pos += 1;
            args.push(Expr::Star);
        } else if !self.at_punct(")") {
            args = self.expr_list()?;
        }
        self.expect_punct(")")?;
        Ok(Expr::Function {
            name,
            distinct,
            args,
        })
    }
}

fn binary(op: BinaryOp, left: Expr, right: Expr) -> Expr {
    Expr::Binary {
        op,
        left: Box::new(left),
        right: Box::new(right),
    }
}

fn to_ident(t: &SqlToken) -> Result<Ident, SqlError> {
    let name = normalize_identifier(&t.text).map_err(|_| SqlError::Syntax {
        expected: "non-empty identifier".into(),
        found: t.text.clone(),
        offset: t.position,
    })?;
    Ok(Ident {
        name,
        raw: t.text.clone(),
        double_quoted: t.is_double_quoted(),
        position: t.position,
    })
}
