//! Exact match, filtered accuracy and recall over linking sets.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::SchemaLinkSet;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty prediction list")]
    Empty,
}

pub fn exact_match(pred: &BTreeSet<String>, truth: &BTreeSet<String>) -> f64 {
    if pred == truth {
        1.0
    } else {
        0.0
    }
}

/// 1 when every ground-truth item survives into the prediction.
pub fn filtered_acc(pred: &BTreeSet<String>, truth: &BTreeSet<String>) -> f64 {
    if truth.is_subset(pred) {
        1.0
    } else {
        0.0
    }
}

/// Fraction of ground-truth items recovered; 1 for an empty truth.
pub fn recall(pred: &BTreeSet<String>, truth: &BTreeSet<String>) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    truth.intersection(pred).count() as f64 / truth.len() as f64
}

/// Macro-averaged metrics for one task, as percentages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub em: f64,
    pub filtered_acc: f64,
    pub recall: f64,
}

impl TaskMetrics {
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (&'a BTreeSet<String>, &'a BTreeSet<String>)>,
    {
        let mut n = 0usize;
        let mut acc = TaskMetrics::default();
        for (pred, truth) in pairs {
            n += 1;
            acc.em += exact_match(pred, truth);
            acc.filtered_acc += filtered_acc(pred, truth);
            acc.recall += recall(pred, truth);
        }
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let scale = 100.0 / n as f64;
        Ok(TaskMetrics {
            em: acc.em * scale,
            filtered_acc: acc.filtered_acc * scale,
            recall: acc.recall * scale,
        })
    }
}

/// Table-prediction and column-prediction panels side by side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub tables: TaskMetrics,
    pub columns: TaskMetrics,
}

pub fn aggregate_report(
    pairs: &[(SchemaLinkSet, SchemaLinkSet)],
) -> Result<MetricReport, MetricsError> {
    let tables = TaskMetrics::from_pairs(pairs.iter().map(|(p, t)| (&p.tables, &t.tables)))?;
    let columns = TaskMetrics::from_pairs(pairs.iter().map(|(p, t)| (&p.columns, &t.columns)))?;
    Ok(MetricReport {
        examples: pairs.len(),
        tables,
        columns,
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20} | {:>8} | {:>12} | {:>8}",
            "Task", "EM", "FilteredAcc", "Rec"
        )?;
        writeln!(f, "{:-<20}-+-{:->8}-+-{:->12}-+-{:->8}", "", "", "", "")?;
        for (name, m) in [
            ("Table Prediction", &self.tables),
            ("Column Prediction", &self.columns),
        ] {
            writeln!(
                f,
                "{:<20} | {:>8.2} | {:>12.2} | {:>8.2}",
                name, m.em, m.filtered_acc, m.recall
            )?;
        }
        write!(f, "({} examples)", self.examples)
    }
}
