//! The response contract between a policy and the scorer.
//!
//! A well-formed response is exactly one `<think>...</think>` block followed
//! by exactly one `<answer>...</answer>` block, with nothing but whitespace
//! outside them. The answer carries two comma-separated lists:
//!
//! ```text
//! <think>...</think><answer>###table: singer, concert
//! ###columns: singer.name, concert.year</answer>
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{
    normalize_identifier, qualify_column, DbSchema, SchemaLinkSet, UNRESOLVED_TABLE,
};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const TABLE_MARKER: &str = "###table:";
pub const COLUMNS_MARKER: &str = "###columns:";
/// Singular spelling that appears in some prompts; only honoured when
/// [`MarkerOptions::accept_singular_columns`] is set.
pub const COLUMN_MARKER_SINGULAR: &str = "###column:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("answer must contain each marker exactly once, found table={table} columns={columns}")]
    MarkerCount { table: usize, columns: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerOptions {
    pub accept_singular_columns: bool,
}

/// Outcome of checking the think/answer envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatCheck {
    pub ok: bool,
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
}

impl FormatCheck {
    fn fail() -> Self {
        FormatCheck {
            ok: false,
            think_text: None,
            answer_text: None,
        }
    }
}

/// Checks the envelope. Never fails; a malformed response is reported as
/// `ok == false` with no extracted text.
pub fn validate_format(raw: &str) -> FormatCheck {
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if raw.matches(tag).count() != 1 {
            return FormatCheck::fail();
        }
    }
    let rest = raw.trim_start();
    let Some(rest) = rest.strip_prefix(THINK_OPEN) else {
        return FormatCheck::fail();
    };
    let Some((think, rest)) = rest.split_once(THINK_CLOSE) else {
        return FormatCheck::fail();
    };
    let Some(rest) = rest.trim_start().strip_prefix(ANSWER_OPEN) else {
        return FormatCheck::fail();
    };
    let Some((answer, tail)) = rest.split_once(ANSWER_CLOSE) else {
        return FormatCheck::fail();
    };
    if !tail.trim().is_empty() {
        return FormatCheck::fail();
    }
    FormatCheck {
        ok: true,
        think_text: Some(think.to_string()),
        answer_text: Some(answer.to_string()),
    }
}

/// Exact substring counts of the table and columns markers.
pub fn count_markers(text: &str) -> (usize, usize) {
    count_markers_with(text, MarkerOptions::default())
}

pub fn count_markers_with(text: &str, options: MarkerOptions) -> (usize, usize) {
    let tables = text.matches(TABLE_MARKER).count();
    let mut columns = text.matches(COLUMNS_MARKER).count();
    if options.accept_singular_columns {
        columns += text.matches(COLUMN_MARKER_SINGULAR).count();
    }
    (tables, columns)
}

pub fn parse_answer(answer_text: &str, schema: &DbSchema) -> Result<SchemaLinkSet, ResponseError> {
    parse_answer_with(answer_text, schema, MarkerOptions::default())
}

/// Extracts the predicted tables and columns from an answer body.
///
/// Unqualified columns are attributed to the single predicted table that owns
/// them in `schema`; otherwise they are kept as `?.column`, which never
/// matches ground truth.
pub fn parse_answer_with(
    answer_text: &str,
    schema: &DbSchema,
    options: MarkerOptions,
) -> Result<SchemaLinkSet, ResponseError> {
    let (table_count, column_count) = count_markers_with(answer_text, options);
    if table_count != 1 || column_count != 1 {
        return Err(ResponseError::MarkerCount {
            table: table_count,
            columns: column_count,
        });
    }
    let table_at = answer_text.find(TABLE_MARKER).expect("counted");
    let (columns_at, columns_marker_len) = match answer_text.find(COLUMNS_MARKER) {
        Some(i) => (i, COLUMNS_MARKER.len()),
        None => (
            answer_text.find(COLUMN_MARKER_SINGULAR).expect("counted"),
            COLUMN_MARKER_SINGULAR.len(),
        ),
    };
    let table_start = table_at + TABLE_MARKER.len();
    let columns_start = columns_at + columns_marker_len;
    let (table_section, column_section) = if table_at < columns_at {
        (
            &answer_text[table_start..columns_at],
            &answer_text[columns_start..],
        )
    } else {
        (
            &answer_text[table_start..],
            &answer_text[columns_start..table_at],
        )
    };

    let mut link = SchemaLinkSet::default();
    for entry in list_entries(table_section) {
        if let Ok(t) = normalize_identifier(entry) {
            link.tables.insert(t);
        }
    }
    for entry in list_entries(column_section) {
        let column = match entry.split_once('.') {
            Some((t, c)) => match (normalize_identifier(t), normalize_identifier(c)) {
                (Ok(t), Ok(c)) => qualify_column(&t, &c),
                _ => continue,
            },
            None => {
                let Ok(c) = normalize_identifier(entry) else {
                    continue;
                };
                let owners: Vec<&String> = link
                    .tables
                    .iter()
                    .filter(|t| schema.table(t).is_some_and(|td| td.has_column(&c)))
                    .collect();
                match owners.as_slice() {
                    [only] => qualify_column(only, &c),
                    _ => qualify_column(UNRESOLVED_TABLE, &c),
                }
            }
        };
        link.columns.insert(column);
    }
    Ok(link)
}

fn list_entries(section: &str) -> impl Iterator<Item = &str> {
    section
        .split([',', '\n'])
        .map(str::trim)
        .filter(|e| !e.is_empty())
}

/// Canonical rendering of a response; the inverse of parsing.
pub fn render_response(think_text: &str, link: &SchemaLinkSet) -> String {
    format!(
        "{THINK_OPEN}{think_text}{THINK_CLOSE}{ANSWER_OPEN}{}{ANSWER_CLOSE}",
        render_answer(link)
    )
}

pub fn render_answer(link: &SchemaLinkSet) -> String {
    let tables: Vec<&str> = link.tables.iter().map(String::as_str).collect();
    let columns: Vec<&str> = link.columns.iter().map(String::as_str).collect();
    format!(
        "{TABLE_MARKER} {}\n{COLUMNS_MARKER} {}",
        tables.join(", "),
        columns.join(", ")
    )
}

/// Counts tokens for the length reward.
pub trait TokenCounter {
    fn count(&self, text: &str) -> usize;
}

/// Maximal runs of non-whitespace.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokens;

impl TokenCounter for WhitespaceTokens {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

impl<F: Fn(&str) -> usize> TokenCounter for F {
    fn count(&self, text: &str) -> usize {
        self(text)
    }
}

pub fn token_count(raw: &str) -> usize {
    WhitespaceTokens.count(raw)
}

/// A response decomposed for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub raw: String,
    pub think_text: Option<String>,
    pub answer_text: Option<String>,
    pub predicted: Option<SchemaLinkSet>,
    pub token_len: usize,
    pub format_ok: bool,
    pub marker_table_count: usize,
    pub marker_columns_count: usize,
}

impl ParsedResponse {
    pub fn parse(raw: &str, schema: &DbSchema) -> Self {
        Self::parse_with(raw, schema, &WhitespaceTokens, MarkerOptions::default())
    }

    /// Markers are counted inside the answer block when the envelope is
    /// valid and over the whole response otherwise.
    pub fn parse_with(
        raw: &str,
        schema: &DbSchema,
        counter: &dyn TokenCounter,
        options: MarkerOptions,
    ) -> Self {
        let check = validate_format(raw);
        let marker_source = check.answer_text.as_deref().unwrap_or(raw);
        let (marker_table_count, marker_columns_count) = count_markers_with(marker_source, options);
        let predicted = check
            .answer_text
            .as_deref()
            .and_then(|a| parse_answer_with(a, schema, options).ok());
        ParsedResponse {
            raw: raw.to_string(),
            think_text: check.think_text,
            answer_text: check.answer_text,
            predicted,
            token_len: counter.count(raw),
            format_ok: check.ok,
            marker_table_count,
            marker_columns_count,
        }
    }
}
