use serde::{Deserialize, Serialize};

use super::SqlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Keyword,
    Identifier,
    Number,
    String,
    Operator,
    Punctuation,
    Star,
}

/// A lexical token. `text` is the exact source slice starting at byte
/// offset `position`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlToken {
    pub kind: TokenKind,
    pub text: String,
    pub position: usize,
}

impl SqlToken {
    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text.eq_ignore_ascii_case(kw)
    }

    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punctuation && self.text == p
    }

    /// Double-quoted identifiers fall back to string literals when they do
    /// not resolve to a column (SQLite behaviour, common in Spider).
    pub fn is_double_quoted(&self) -> bool {
        self.kind == TokenKind::Identifier && self.text.starts_with('"')
    }
}

const KEYWORDS: &[&str] = &[
    "select",
    "from",
    "where",
    "group",
    "by",
    "having",
    "order",
    "asc",
    "desc",
    "limit",
    "offset",
    "union",
    "intersect",
    "except",
    "all",
    "distinct",
    "as",
    "join",
    "inner",
    "left",
    "right",
    "full",
    "outer",
    "cross",
    "natural",
    "on",
    "using",
    "and",
    "or",
    "not",
    "in",
    "between",
    "like",
    "is",
    "null",
    "exists",
    "case",
    "when",
    "then",
    "else",
    "end",
    "cast",
    "with",
    "insert",
    "update",
    "delete",
    "create",
    "drop",
    "values",
    "into",
    "set",
    "glob",
];

pub fn is_keyword(word: &str) -> bool {
    KEYWORDS.iter().any(|k| k.eq_ignore_ascii_case(word))
}

/// Splits Spider-dialect SQL into tokens. Whitespace and `--` comments are
/// skipped; everything else is covered by exactly one token.
pub fn tokenize_sql(sql: &str) -> Result<Vec<SqlToken>, SqlError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'-' && bytes.get(i + 1) == Some(&b'-') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        let kind = match c {
            b'\'' => {
                i = scan_quoted(bytes, i, b'\'')?;
                TokenKind::String
            }
            b'"' | b'`' => {
                i = scan_quoted(bytes, i, c)?;
                TokenKind::Identifier
            }
            b'[' => {
                match bytes[i + 1..].iter().position(|&b| b == b']') {
                    Some(off) => i += off + 2,
                    None => {
                        return Err(SqlError::Lex {
                            message: "unterminated bracket identifier".into(),
                            offset: start,
                        })
                    }
                }
                TokenKind::Identifier
            }
            b'0'..=b'9' => {
                i = scan_number(bytes, i);
                TokenKind::Number
            }
            b'.' if bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i = scan_number(bytes, i);
                TokenKind::Number
            }
            b'*' => {
                i += 1;
                TokenKind::Star
            }
            b'(' | b')' | b',' | b'.' | b';' => {
                i += 1;
                TokenKind::Punctuation
            }
            b'=' | b'<' | b'>' | b'!' | b'+' | b'-' | b'/' | b'%' | b'|' => {
                let two = &sql[i..(i + 2).min(sql.len())];
                let len = match two {
                    "<=" | ">=" | "<>" | "!=" | "==" | "||" => 2,
                    _ if c == b'!' || c == b'|' => {
                        return Err(SqlError::Lex {
                            message: format!("unexpected character {:?}", c as char),
                            offset: start,
                        })
                    }
                    _ => 1,
                };
                i += len;
                TokenKind::Operator
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                if is_keyword(&sql[start..i]) {
                    TokenKind::Keyword
                } else {
                    TokenKind::Identifier
                }
            }
            _ => {
                let ch = sql[i..].chars().next().unwrap_or('?');
                return Err(SqlError::Lex {
                    message: format!("unexpected character {ch:?}"),
                    offset: start,
                });
            }
        };
        tokens.push(SqlToken {
            kind,
            text: sql[start..i].to_string(),
            position: start,
        });
    }
    Ok(tokens)
}

// Returns the index just past the closing quote. A doubled quote escapes.
fn scan_quoted(bytes: &[u8], start: usize, quote: u8) -> Result<usize, SqlError> {
    let mut i = start + 1;
    while i < bytes.len() {
        if bytes[i] == quote {
            if bytes.get(i + 1) == Some(&quote) {
                i += 2;
                continue;
            }
            return Ok(i + 1);
        }
        i += 1;
    }
    let what = if quote == b'\'' {
        "string literal"
    } else {
        "quoted identifier"
    };
    Err(SqlError::Lex {
        message: format!("unterminated {what}"),
        offset: start,
    })
}

fn scan_number(bytes: &[u8], start: usize) -> usize {
    let mut i = start;
    while i < bytes.len() && bytes[i].is_ascii_digit() {
        i += 1;
    }
    if i < bytes.len() && bytes[i] == b'.' {
        i += 1;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
    }
    if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
        let mut j = i + 1;
        if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
            j += 1;
        }
        if j < bytes.len() && bytes[j].is_ascii_digit() {
            i = j;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
        }
    }
    i
}
