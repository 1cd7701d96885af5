//! Ground-truth extraction: which tables and columns does a gold SQL query
//! touch?
//!
//! The pipeline is [`tokenize_sql`] → [`parse_select`] → [`extract_refs`],
//! wrapped by [`build_ground_truth`]. The grammar covers the SELECT subset
//! used by Spider. Anything outside it fails with
//! [`SqlError::Unsupported`] instead of producing a partial set.

mod ast;
mod extract;
mod lexer;
mod parser;

pub use ast::*;
pub use extract::{extract_refs, extract_refs_with, ExtractOptions};
pub use lexer::{is_keyword, tokenize_sql, SqlToken, TokenKind};
pub use parser::parse_select;

use thiserror::Error;

use crate::schema::{DbSchema, SchemaLinkSet};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SqlError {
    #[error("empty query")]
    Empty,
    #[error("lex error at byte {offset}: {message}")]
    Lex { message: String, offset: usize },
    #[error("syntax error at byte {offset}: expected {expected}, found {found:?}")]
    Syntax {
        expected: String,
        found: String,
        offset: usize,
    },
    #[error("unsupported construct at byte {offset}: {construct}")]
    Unsupported { construct: String, offset: usize },
    #[error("unknown table {name:?} at byte {offset}")]
    UnknownTable { name: String, offset: usize },
    #[error("unknown table or alias {name:?} at byte {offset}")]
    UnknownQualifier { name: String, offset: usize },
    #[error("unknown column {name:?} at byte {offset}")]
    UnknownColumn { name: String, offset: usize },
    #[error("ambiguous column {name:?} at byte {offset}: owned by {candidates:?}")]
    AmbiguousColumn {
        name: String,
        candidates: Vec<String>,
        offset: usize,
    },
}

pub fn build_ground_truth(sql: &str, schema: &DbSchema) -> Result<SchemaLinkSet, SqlError> {
    build_ground_truth_with(sql, schema, ExtractOptions::default())
}

pub fn build_ground_truth_with(
    sql: &str,
    schema: &DbSchema,
    options: ExtractOptions,
) -> Result<SchemaLinkSet, SqlError> {
    let tokens = tokenize_sql(sql)?;
    let ast = parse_select(&tokens)?;
    extract_refs_with(&ast, schema, options)
}
