//! Resolution of a parsed query against a schema into the set of base
//! tables and qualified columns it references.

use std::collections::{BTreeSet, HashSet};

use super::ast::*;
use super::SqlError;
use crate::schema::{qualify_column, DbSchema, SchemaLinkSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractOptions {
    /// Whether columns referenced only in `JOIN ... ON` conditions count.
    pub include_join_columns: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            include_join_columns: true,
        }
    }
}

pub fn extract_refs(ast: &SelectAst, schema: &DbSchema) -> Result<SchemaLinkSet, SqlError> {
    extract_refs_with(ast, schema, ExtractOptions::default())
}

pub fn extract_refs_with(
    ast: &SelectAst,
    schema: &DbSchema,
    options: ExtractOptions,
) -> Result<SchemaLinkSet, SqlError> {
    let mut ex = Extractor {
        schema,
        options,
        scopes: Vec::new(),
        out: SchemaLinkSet::default(),
        in_join_condition: false,
    };
    ex.query(ast)?;
    Ok(ex.out)
}

enum Source {
    Base {
        table: String,
        alias: Option<String>,
    },
    Derived {
        alias: Option<String>,
        columns: BTreeSet<String>,
    },
}

impl Source {
    fn binds(&self, qualifier: &str) -> bool {
        match self {
            Source::Base { table, alias } => match alias {
                Some(a) => a == qualifier || table == qualifier,
                None => table == qualifier,
            },
            Source::Derived { alias, .. } => alias.as_deref() == Some(qualifier),
        }
    }
}

#[derive(Default)]
struct Scope {
    sources: Vec<Source>,
    select_aliases: HashSet<String>,
}

struct Extractor<'s> {
    schema: &'s DbSchema,
    options: ExtractOptions,
    scopes: Vec<Scope>,
    out: SchemaLinkSet,
    in_join_condition: bool,
}

/// What a column reference resolved to.
enum Resolved {
    Base(String),
    Opaque,
}

impl<'s> Extractor<'s> {
    fn query(&mut self, ast: &SelectAst) -> Result<(), SqlError> {
        let mut scope = Scope::default();
        if let Some(from) = &ast.from {
            for source in from.sources() {
                scope.sources.push(self.source(source)?);
            }
        }
        for item in &ast.items {
            if let SelectItem::Expr { alias: Some(a), .. } = item {
                scope.select_aliases.insert(a.name.clone());
            }
        }
        self.scopes.push(scope);
        let result = self.query_body(ast);
        self.scopes.pop();
        result?;
        if let Some(set) = &ast.set_op {
            self.query(&set.right)?;
        }
        Ok(())
    }

    fn query_body(&mut self, ast: &SelectAst) -> Result<(), SqlError> {
        for item in &ast.items {
            match item {
                SelectItem::Wildcard => {}
                SelectItem::QualifiedWildcard(q) => {
                    if self.find_qualifier(&q.name).is_none() {
                        return Err(SqlError::UnknownQualifier {
                            name: q.name.clone(),
                            offset: q.position,
                        });
                    }
                }
                SelectItem::Expr { expr, .. } => self.expr(expr)?,
            }
        }
        if let Some(from) = &ast.from {
            for join in &from.joins {
                if let Some(on) = &join.on {
                    self.in_join_condition = true;
                    let r = self.expr(on);
                    self.in_join_condition = false;
                    r?;
                }
            }
        }
        if let Some(w) = &ast.where_clause {
            self.expr(w)?;
        }
        for g in &ast.group_by {
            self.expr(g)?;
        }
        if let Some(h) = &ast.having {
            self.expr(h)?;
        }
        for o in &ast.order_by {
            self.expr(&o.expr)?;
        }
        if let Some(l) = &ast.limit {
            self.expr(l)?;
        }
        if let Some(o) = &ast.offset {
            self.expr(o)?;
        }
        Ok(())
    }

    fn source(&mut self, source: &TableSource) -> Result<Source, SqlError> {
        match source {
            TableSource::Table { name, alias } => {
                if !self.schema.has_table(&name.name) {
                    return Err(SqlError::UnknownTable {
                        name: name.name.clone(),
                        offset: name.position,
                    });
                }
                self.out.tables.insert(name.name.clone());
                Ok(Source::Base {
                    table: name.name.clone(),
                    alias: alias.as_ref().map(|a| a.name.clone()),
                })
            }
            TableSource::Derived { query, alias } => {
                // A derived table sees the enclosing scopes but not its siblings.
                let saved = self.in_join_condition;
                self.in_join_condition = false;
                let r = self.query(query);
                self.in_join_condition = saved;
                r?;
                Ok(Source::Derived {
                    alias: alias.as_ref().map(|a| a.name.clone()),
                    columns: self.output_columns(query),
                })
            }
        }
    }

    fn output_columns(&self, query: &SelectAst) -> BTreeSet<String> {
        let mut cols = BTreeSet::new();
        for item in &query.items {
            match item {
                SelectItem::Expr { alias: Some(a), .. } => {
                    cols.insert(a.name.clone());
                }
                SelectItem::Expr {
                    expr: Expr::Column { name, .. },
                    alias: None,
                } => {
                    cols.insert(name.name.clone());
                }
                SelectItem::Expr { .. } => {}
                SelectItem::Wildcard | SelectItem::QualifiedWildcard(_) => {
                    let Some(from) = &query.from else { continue };
                    for s in from.sources() {
                        match s {
                            TableSource::Table { name, .. } => {
                                if let Some(t) = self.schema.table(&name.name) {
                                    cols.extend(t.columns.iter().cloned());
                                }
                            }
                            TableSource::Derived { query, .. } => {
                                cols.extend(self.output_columns(query));
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn find_qualifier(&self, qualifier: &str) -> Option<&Source> {
        for scope in self.scopes.iter().rev() {
            // Aliases shadow bare table names within one scope.
            let by_alias = scope.sources.iter().find(|s| match s {
                Source::Base { alias: Some(a), .. } => a == qualifier,
                Source::Derived { alias, .. } => alias.as_deref() == Some(qualifier),
                _ => false,
            });
            if let Some(s) = by_alias.or_else(|| scope.sources.iter().find(|s| s.binds(qualifier)))
            {
                return Some(s);
            }
        }
        None
    }

    fn resolve(&self, qualifier: Option<&Ident>, name: &Ident) -> Result<Resolved, SqlError> {
        if let Some(q) = qualifier {
            let source =
                self.find_qualifier(&q.name)
                    .ok_or_else(|| SqlError::UnknownQualifier {
                        name: q.name.clone(),
                        offset: q.position,
                    })?;
            return match source {
                Source::Base { table, .. } => {
                    let owns = self
                        .schema
                        .table(table)
                        .is_some_and(|t| t.has_column(&name.name));
                    if owns {
                        Ok(Resolved::Base(qualify_column(table, &name.name)))
                    } else {
                        Err(SqlError::UnknownColumn {
                            name: format!("{}.{}", q.name, name.name),
                            offset: name.position,
                        })
                    }
                }
                Source::Derived { columns, .. } => {
                    if columns.contains(&name.name) {
                        Ok(Resolved::Opaque)
                    } else {
                        Err(SqlError::UnknownColumn {
                            name: format!("{}.{}", q.name, name.name),
                            offset: name.position,
                        })
                    }
                }
            };
        }

        for scope in self.scopes.iter().rev() {
            let mut owners: BTreeSet<String> = BTreeSet::new();
            let mut opaque = false;
            for s in &scope.sources {
                match s {
                    Source::Base { table, .. } => {
                        if self
                            .schema
                            .table(table)
                            .is_some_and(|t| t.has_column(&name.name))
                        {
                            owners.insert(table.clone());
                        }
                    }
                    Source::Derived { columns, .. } => {
                        if columns.contains(&name.name) {
                            opaque = true;
                        }
                    }
                }
            }
            match (owners.len(), opaque) {
                (0, false) => continue,
                (0, true) => return Ok(Resolved::Opaque),
                (1, false) => {
                    let table = owners.into_iter().next().expect("one owner");
                    return Ok(Resolved::Base(qualify_column(&table, &name.name)));
                }
                _ => {
                    let mut candidates: Vec<String> = owners.into_iter().collect();
                    if opaque {
                        candidates.push("<derived table>".into());
                    }
                    return Err(SqlError::AmbiguousColumn {
                        name: name.name.clone(),
                        candidates,
                        offset: name.position,
                    });
                }
            }
        }

        let is_select_alias = self
            .scopes
            .last()
            .is_some_and(|s| s.select_aliases.contains(&name.name));
        if is_select_alias || name.double_quoted {
            // Either a reference to a select-list alias or a double-quoted
            // string literal.
            return Ok(Resolved::Opaque);
        }
        Err(SqlError::UnknownColumn {
            name: name.name.clone(),
            offset: name.position,
        })
    }

    fn expr(&mut self, expr: &Expr) -> Result<(), SqlError> {
        match expr {
            Expr::Column { qualifier, name } => {
                if let Resolved::Base(col) = self.resolve(qualifier.as_ref(), name)? {
                    if !self.in_join_condition || self.options.include_join_columns {
                        self.out.columns.insert(col);
                    }
                }
            }
            Expr::Number(_) | Expr::Str(_) | Expr::Null | Expr::Star => {}
            Expr::Function { args, .. } => {
                for a in args {
                    self.expr(a)?;
                }
            }
            Expr::Unary { expr, .. } | Expr::IsNull { expr, .. } => self.expr(expr)?,
            Expr::Binary { left, right, .. } => {
                self.expr(left)?;
                self.expr(right)?;
            }
            Expr::Between {
                expr, low, high, ..
            } => {
                self.expr(expr)?;
                self.expr(low)?;
                self.expr(high)?;
            }
            Expr::InList { expr, list, .. } => {
                self.expr(expr)?;
                for e in list {
                    self.expr(e)?;
                }
            }
            Expr::InSubquery { expr, query, .. } => {
                self.expr(expr)?;
                self.subquery(query)?;
            }
            Expr::Like { expr, pattern, .. } => {
                self.expr(expr)?;
                self.expr(pattern)?;
            }
            Expr::Exists { query, .. } | Expr::Subquery(query) => self.subquery(query)?,
        }
        Ok(())
    }

    fn subquery(&mut self, query: &SelectAst) -> Result<(), SqlError> {
        let saved = self.in_join_condition;
        self.in_join_condition = false;
        let r = self.query(query);
        self.in_join_condition = saved;
        r
    }
}
