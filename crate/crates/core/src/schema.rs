//! Database schemas, schema-link sets and linked examples.
//!
//! Identifiers are compared case-insensitively everywhere in the crate, so
//! every name that enters one of these types goes through
//! [`normalize_identifier`] first. Columns are always stored in qualified
//! `table.column` form.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Placeholder table used for unqualified column predictions that could not be
/// attributed to a single table. Such entries never match ground truth.
pub const UNRESOLVED_TABLE: &str = "?";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("invalid identifier {0:?}: empty after trimming")]
    InvalidIdentifier(String),
    #[error("database {0:?} has no tables")]
    NoTables(String),
    #[error("table {table:?} in database {db_id:?} has no columns")]
    NoColumns { db_id: String, table: String },
    #[error("duplicate table {table:?} in database {db_id:?}")]
    DuplicateTable { db_id: String, table: String },
    #[error("duplicate column {column:?} in table {table:?}")]
    DuplicateColumn { table: String, column: String },
    #[error("malformed qualified column {0:?}")]
    MalformedQualified(String),
    #[error("column {column:?} references table {table:?} which is not in the table set")]
    InconsistentLink { table: String, column: String },
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
}

/// Lowercases an identifier and strips one layer of surrounding quoting
/// (`"x"`, `` `x` ``, `[x]`, `'x'`). Internal characters are kept verbatim.
pub fn normalize_identifier(raw: &str) -> Result<String, SchemaError> {
    let mut s = raw.trim();
    loop {
        let stripped = strip_quotes(s).trim();
        if stripped.len() == s.len() {
            break;
        }
        s = stripped;
    }
    if s.is_empty() {
        return Err(SchemaError::InvalidIdentifier(raw.to_string()));
    }
    Ok(s.to_lowercase())
}

fn strip_quotes(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 {
        let (first, last) = (b[0], b[b.len() - 1]);
        let matched = matches!(
            (first, last),
            (b'"', b'"') | (b'`', b'`') | (b'[', b']') | (b'\'', b'\'')
        );
        if matched {
            return &s[1..s.len() - 1];
        }
    }
    s
}

pub fn qualify_column(table: &str, column: &str) -> String {
    format!("{table}.{column}")
}

/// Inverse of [`qualify_column`]. Splits on the first dot.
pub fn split_qualified(qualified: &str) -> Result<(&str, &str), SchemaError> {
    match qualified.split_once('.') {
        Some((t, c)) if !t.is_empty() && !c.is_empty() => Ok((t, c)),
        _ => Err(SchemaError::MalformedQualified(qualified.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<String>,
}

impl TableDef {
    pub fn has_column(&self, column: &str) -> bool {
        self.columns.iter().any(|c| c == column)
    }
}

/// A database's tables and their columns, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct DbSchema {
    db_id: String,
    tables: Vec<TableDef>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    db_id: String,
    tables: Vec<TableDef>,
}

impl TryFrom<RawSchema> for DbSchema {
    type Error = SchemaError;
    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        let tables = raw
            .tables
            .into_iter()
            .map(|t| (t.name, t.columns))
            .collect::<Vec<_>>();
        DbSchema::new(raw.db_id, tables)
    }
}

impl From<DbSchema> for RawSchema {
    fn from(s: DbSchema) -> Self {
        RawSchema {
            db_id: s.db_id,
            tables: s.tables,
        }
    }
}

impl DbSchema {
    /// Builds a schema from raw table and column names, normalizing and
    /// validating them.
    pub fn new<T, C>(
        db_id: impl Into<String>,
        tables: Vec<(T, Vec<C>)>,
    ) -> Result<Self, SchemaError>
    where
        T: AsRef<str>,
        C: AsRef<str>,
    {
        let db_id = db_id.into();
        if tables.is_empty() {
            return Err(SchemaError::NoTables(db_id));
        }
        let mut seen_tables = HashSet::new();
        let mut defs = Vec::with_capacity(tables.len());
        for (name, columns) in tables {
            let name = normalize_identifier(name.as_ref())?;
            if !seen_tables.insert(name.clone()) {
                return Err(SchemaError::DuplicateTable { db_id, table: name });
            }
            if columns.is_empty() {
                return Err(SchemaError::NoColumns { db_id, table: name });
            }
            let mut seen_cols = HashSet::new();
            let mut cols = Vec::with_capacity(columns.len());
            for c in columns {
                let c = normalize_identifier(c.as_ref())?;
                if !seen_cols.insert(c.clone()) {
                    return Err(SchemaError::DuplicateColumn {
                        table: name,
                        column: c,
                    });
                }
                cols.push(c);
            }
            defs.push(TableDef {
                name,
                columns: cols,
            });
        }
        Ok(DbSchema {
            db_id,
            tables: defs,
        })
    }

    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn tables(&self) -> &[TableDef] {
        &self.tables
    }

    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.table(name).is_some()
    }

    pub fn has_qualified_column(&self, qualified: &str) -> bool {
        match split_qualified(qualified) {
            Ok((t, c)) => self.table(t).is_some_and(|t| t.has_column(c)),
            Err(_) => false,
        }
    }

    /// Every column of the schema in qualified form, in declaration order.
    pub fn qualified_columns(&self) -> Vec<String> {
        self.tables
            .iter()
            .flat_map(|t| t.columns.iter().map(move |c| qualify_column(&t.name, c)))
            .collect()
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }
}

/// A set of tables and qualified columns, used for both ground truth and
/// predictions. Order and duplicates are never observable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SchemaLinkSet {
    pub tables: BTreeSet<String>,
    pub columns: BTreeSet<String>,
}

impl SchemaLinkSet {
    pub fn new<I, J, S, U>(tables: I, columns: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = U>,
        S: Into<String>,
        U: Into<String>,
    {
        SchemaLinkSet {
            tables: tables.into_iter().map(Into::into).collect(),
            columns: columns.into_iter().map(Into::into).collect(),
        }
    }

    /// Builds a set from raw names, normalizing each one. Columns must be
    /// qualified.
    pub fn from_raw<I, J, S, U>(tables: I, columns: J) -> Result<Self, SchemaError>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = U>,
        S: AsRef<str>,
        U: AsRef<str>,
    {
        let mut set = SchemaLinkSet::default();
        for t in tables {
            set.tables.insert(normalize_identifier(t.as_ref())?);
        }
        for c in columns {
            let (t, col) = split_qualified(c.as_ref())?;
            set.columns.insert(qualify_column(
                &normalize_identifier(t)?,
                &normalize_identifier(col)?,
            ));
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.columns.is_empty()
    }

    /// Checks the ground-truth invariant: every column's table is in the table
    /// set.
    pub fn check_consistent(&self) -> Result<(), SchemaError> {
        for c in &self.columns {
            let (t, _) = split_qualified(c)?;
            if !self.tables.contains(t) {
                return Err(SchemaError::InconsistentLink {
                    table: t.to_string(),
                    column: c.clone(),
                });
            }
        }
        Ok(())
    }

    /// Checks that every table and column exists in `schema`.
    pub fn check_resolvable(&self, schema: &DbSchema) -> Result<(), SchemaError> {
        for t in &self.tables {
            if !schema.has_table(t) {
                return Err(SchemaError::UnknownTable(t.clone()));
            }
        }
        for c in &self.columns {
            if !schema.has_qualified_column(c) {
                return Err(SchemaError::UnknownColumn(c.clone()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SchemaLinkSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tables: Vec<&str> = self.tables.iter().map(String::as_str).collect();
        let columns: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        write!(
            f,
            "tables [{}] columns [{}]",
            tables.join(", "),
            columns.join(", ")
        )
    }
}

/// A question paired with its database and ground-truth linking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkedExample {
    pub id: String,
    pub db_id: String,
    pub question: String,
    pub sql: String,
    pub truth: SchemaLinkSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<String>,
}

impl LinkedExample {
    /// Validates the ground truth against the example's schema.
    pub fn validate(&self, schema: &DbSchema) -> Result<(), SchemaError> {
        if self.truth.tables.is_empty() {
            return Err(SchemaError::NoTables(self.id.clone()));
        }
        self.truth.check_consistent()?;
        self.truth.check_resolvable(schema)
    }
}
