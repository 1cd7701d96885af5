//! Spider-format ingestion, CoT prompt construction and run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::render_answer;
use crate::reward::RewardError;
use crate::schema::{DbSchema, LinkedExample, SchemaError};
use crate::sim::{SimConfig, SimError, SimQuestion};
use crate::sql::{build_ground_truth_with, ExtractOptions};

/// Template for CoT-generation prompts. Bump the file version on any change.
pub const COT_PROMPT_TEMPLATE: &str = include_str!("../assets/cot_prompt_v1.txt");
pub const COT_PROMPT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("record {index}: duplicate db_id {db_id:?}")]
    DuplicateDb { index: usize, db_id: String },
    #[error("record {index}: column {column:?} refers to table index {table_index} but only {n_tables} tables exist")]
    TableIndex {
        index: usize,
        column: String,
        table_index: i64,
        n_tables: usize,
    },
    #[error("record {index}: {source}")]
    Schema { index: usize, source: SchemaError },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no linked example for db {0:?}")]
    MissingSchema(String),
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads either a JSON array or one JSON value per line, returning raw
/// values so per-record failures can name their position.
pub fn read_records(path: &Path) -> Result<Vec<serde_json::Value>, DatasetError> {
    let text = read(path)?;
    let json_err = |source| DatasetError::Json {
        path: path.to_path_buf(),
        source,
    };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(json_err);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err))
        .collect()
}

fn decode<T: DeserializeOwned>(index: usize, value: serde_json::Value) -> Result<T, DatasetError> {
    serde_json::from_value(value).map_err(|e| DatasetError::Record {
        index,
        message: e.to_string(),
    })
}

/// Reads typed JSONL (or a JSON array) of `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    read_records(path)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| decode(i, v))
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Deserialize)]
struct SpiderSchemaRecord {
    db_id: String,
    table_names_original: Vec<String>,
    column_names_original: Vec<(i64, String)>,
}

pub fn parse_spider_schemas(
    records: Vec<serde_json::Value>,
) -> Result<BTreeMap<String, DbSchema>, DatasetError> {
    let mut out = BTreeMap::new();
    for (index, value) in records.into_iter().enumerate() {
        let rec: SpiderSchemaRecord = decode(index, value)?;
        let n_tables = rec.table_names_original.len();
        let mut tables: Vec<(String, Vec<String>)> = rec
            .table_names_original
            .into_iter()
            .map(|t| (t, Vec::new()))
            .collect();
        for (table_index, column) in rec.column_names_original {
            if table_index == -1 {
                continue;
            }
            let slot = usize::try_from(table_index)
                .ok()
                .and_then(|i| tables.get_mut(i))
                .ok_or_else(|| DatasetError::TableIndex {
                    index,
                    column: column.clone(),
                    table_index,
                    n_tables,
                })?;
            slot.1.push(column);
        }
        let schema = DbSchema::new(rec.db_id, tables)
            .map_err(|source| DatasetError::Schema { index, source })?;
        let db_id = schema.db_id().to_string();
        if out.contains_key(&db_id) {
            return Err(DatasetError::DuplicateDb { index, db_id });
        }
        out.insert(db_id, schema);
    }
    Ok(out)
}

/// Loads a Spider `tables.json`, skipping the `*` pseudo-column.
pub fn load_spider_schemas(path: &Path) -> Result<BTreeMap<String, DbSchema>, DatasetError> {
    parse_spider_schemas(read_records(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub db_id: String,
    pub question: String,
    pub query: String,
}

/// An input record that did not make it into the linked dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub index: usize,
    pub db_id: Option<String>,
    pub query: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedExamples {
    pub examples: Vec<LinkedExample>,
    pub rejections: Vec<Rejection>,
}

pub fn link_examples(
    records: Vec<serde_json::Value>,
    schemas: &BTreeMap<String, DbSchema>,
    options: ExtractOptions,
) -> LoadedExamples {
    let mut out = LoadedExamples::default();
    for (index, value) in records.into_iter().enumerate() {
        let raw: RawExample = match decode(index, value) {
            Ok(r) => r,
            Err(e) => {
                out.rejections.push(Rejection {
                    index,
                    db_id: None,
                    query: None,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let reject = |reason: String| Rejection {
            index,
            db_id: Some(raw.db_id.clone()),
            query: Some(raw.query.clone()),
            reason,
        };
        let Some(schema) = schemas.get(&raw.db_id) else {
            out.rejections
                .push(reject(format!("unknown db_id {:?}", raw.db_id)));
            continue;
        };
        let truth = match build_ground_truth_with(&raw.query, schema, options) {
            Ok(t) => t,
            Err(e) => {
                out.rejections.push(reject(e.to_string()));
                continue;
            }
        };
        let example = LinkedExample {
            id: index.to_string(),
            db_id: schema.db_id().to_string(),
            question: raw.question.clone(),
            sql: raw.query.clone(),
            truth,
            cot: None,
        };
        match example.validate(schema) {
            Ok(()) => out.examples.push(example),
            Err(e) => out.rejections.push(reject(e.to_string())),
        }
    }
    out
}

/// Loads `{db_id, question, query}` records and extracts their ground truth.
/// Records that fail are logged as rejections; ids are input positions.
pub fn load_examples(
    path: &Path,
    schemas: &BTreeMap<String, DbSchema>,
) -> Result<LoadedExamples, DatasetError> {
    Ok(link_examples(
        read_records(path)?,
        schemas,
        ExtractOptions::default(),
    ))
}

pub fn load_examples_with(
    path: &Path,
    schemas: &BTreeMap<String, DbSchema>,
    options: ExtractOptions,
) -> Result<LoadedExamples, DatasetError> {
    Ok(link_examples(read_records(path)?, schemas, options))
}

/// Pairs linked examples with their schemas for the simulator.
pub fn sim_questions(
    examples: &[LinkedExample],
    schemas: &BTreeMap<String, DbSchema>,
) -> Result<Vec<SimQuestion>, DatasetError> {
    examples
        .iter()
        .map(|e| {
            let schema = schemas
                .get(&e.db_id)
                .ok_or_else(|| DatasetError::MissingSchema(e.db_id.clone()))?;
            Ok(SimQuestion {
                example: e.clone(),
                schema: schema.clone(),
            })
        })
        .collect()
}

fn schema_listing(schema: &DbSchema) -> String {
    schema
        .tables()
        .iter()
        .map(|t| format!("{}({})", t.name, t.columns.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fills the CoT template in a single pass, so placeholder-like text inside
/// the question is left alone.
pub fn build_cot_prompt(example: &LinkedExample, schema: &DbSchema) -> String {
    let schema_text = schema_listing(schema);
    let answer = render_answer(&example.truth);
    let mut out = String::with_capacity(COT_PROMPT_TEMPLATE.len() + 256);
    let mut rest = COT_PROMPT_TEMPLATE;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let slot = [
            ("{question}", example.question.as_str()),
            ("{schema}", schema_text.as_str()),
            ("{answer}", answer.as_str()),
        ]
        .into_iter()
        .find(|(key, _)| tail.starts_with(key));
        match slot {
            Some((key, value)) => {
                out.push_str(value);
                rest = &tail[key.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub schemas: PathBuf,
    pub examples: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            schemas: PathBuf::from("tables.json"),
            examples: PathBuf::from("train.json"),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub include_join_columns: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            include_join_columns: true,
        }
    }
}

impl ExtractConfig {
    pub fn options(&self) -> ExtractOptions {
        ExtractOptions {
            include_join_columns: self.include_join_columns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptsConfig {
    pub count: usize,
}

impl Default for PromptsConfig {
    fn default() -> Self {
        PromptsConfig { count: 200 }
    }
}

/// Everything a run needs, stored as one TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub extract: ExtractConfig,
    pub prompts: PromptsConfig,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.sim.validate().map_err(|e| match e {
            SimError::Reward(RewardError::InvalidConfig(m)) => DatasetError::Config(m),
            other => DatasetError::Config(other.to_string()),
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, DatasetError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| DatasetError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates a config file. Relative paths inside it resolve
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let mut cfg = Self::from_toml_str(&read(path)?)?;
        if let Some(dir) = path.parent() {
            for p in [
                &mut cfg.paths.schemas,
                &mut cfg.paths.examples,
                &mut cfg.paths.output_dir,
            ] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }
}
