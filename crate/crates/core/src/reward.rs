//! Rule-based rewards: format, marker, reasoning length and schema linking.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::response::ParsedResponse;
use crate::schema::SchemaLinkSet;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("table reward needs a non-empty ground-truth table set")]
    EmptyTruth,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub format: f64,
    pub marker: f64,
    pub length: f64,
    pub schema: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            format: 1.0,
            marker: 1.0,
            length: 1.0,
            schema: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub r_tmax: f64,
    pub p_tmax: f64,
    pub r_cmax: f64,
    pub p_cmax: f64,
    pub lower_len: usize,
    pub upper_len: usize,
    pub weights: RewardWeights,
    /// Reward `|truth - pred|` instead of `|truth ∩ pred|` in the
    /// schema terms. Kept for comparison runs only: it makes the empty
    /// prediction optimal.
    pub literal_set_difference_mode: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            r_tmax: 2.0,
            p_tmax: 2.0,
            r_cmax: 1.0,
            p_cmax: 1.0,
            lower_len: 64,
            upper_len: 512,
            weights: RewardWeights::default(),
            literal_set_difference_mode: false,
        }
    }
}

impl RewardConfig {
    /// Table caps must strictly dominate column caps.
    pub fn validate(&self) -> Result<(), RewardError> {
        let caps = [self.r_tmax, self.p_tmax, self.r_cmax, self.p_cmax];
        if caps.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(RewardError::InvalidConfig(
                "reward and penalty caps must be positive and finite".into(),
            ));
        }
        if self.r_tmax <= self.r_cmax {
            return Err(RewardError::InvalidConfig(format!(
                "r_tmax ({}) must exceed r_cmax ({})",
                self.r_tmax, self.r_cmax
            )));
        }
        if self.p_tmax <= self.p_cmax {
            return Err(RewardError::InvalidConfig(format!(
                "p_tmax ({}) must exceed p_cmax ({})",
                self.p_tmax, self.p_cmax
            )));
        }
        if self.lower_len == 0 || self.lower_len >= self.upper_len {
            return Err(RewardError::InvalidConfig(format!(
                "need 0 < lower_len < upper_len, got {} and {}",
                self.lower_len, self.upper_len
            )));
        }
        let w = &self.weights;
        if [w.format, w.marker, w.length, w.schema]
            .iter()
            .any(|x| !x.is_finite())
        {
            return Err(RewardError::InvalidConfig("weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_f: f64,
    pub r_c: f64,
    pub r_l: f64,
    pub r_st: f64,
    pub r_sc: f64,
    pub r_s: f64,
    pub total: f64,
    pub parse_failed: bool,
}

pub fn format_reward(resp: &ParsedResponse) -> f64 {
    if resp.format_ok {
        1.0
    } else {
        0.0
    }
}

pub fn marker_reward(resp: &ParsedResponse) -> f64 {
    f64::from(u8::from(resp.marker_table_count == 1) + u8::from(resp.marker_columns_count == 1))
}

/// 1 on the half-open window `[lower_len, upper_len)`.
pub fn length_reward(token_len: usize, cfg: &RewardConfig) -> f64 {
    if (cfg.lower_len..cfg.upper_len).contains(&token_len) {
        1.0
    } else {
        0.0
    }
}

/// Per-item credit for recovered truth minus per-item penalty for wrong
/// predictions. An empty truth earns no credit and an empty prediction
/// carries no penalty.
fn linking_reward(
    truth: &BTreeSet<String>,
    pred: &BTreeSet<String>,
    reward_max: f64,
    penalty_max: f64,
    literal: bool,
) -> f64 {
    let credited = if literal {
        truth.difference(pred).count()
    } else {
        truth.intersection(pred).count()
    };
    let wrong = pred.difference(truth).count();
    let gain = if truth.is_empty() {
        0.0
    } else {
        reward_max / truth.len() as f64 * credited as f64
    };
    let loss = if pred.is_empty() {
        0.0
    } else {
        penalty_max / pred.len() as f64 * wrong as f64
    };
    gain - loss
}

pub fn table_reward(
    truth: &BTreeSet<String>,
    pred: &BTreeSet<String>,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    if truth.is_empty() {
        return Err(RewardError::EmptyTruth);
    }
    Ok(linking_reward(
        truth,
        pred,
        cfg.r_tmax,
        cfg.p_tmax,
        cfg.literal_set_difference_mode,
    ))
}

pub fn column_reward(truth: &BTreeSet<String>, pred: &BTreeSet<String>, cfg: &RewardConfig) -> f64 {
    linking_reward(
        truth,
        pred,
        cfg.r_cmax,
        cfg.p_cmax,
        cfg.literal_set_difference_mode,
    )
}

/// Scores one response. Schema terms are zero when the answer did not parse.
pub fn total_reward(
    resp: &ParsedResponse,
    truth: &SchemaLinkSet,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let r_f = format_reward(resp);
    let r_c = marker_reward(resp);
    let r_l = length_reward(resp.token_len, cfg);
    let (r_st, r_sc, parse_failed) = match &resp.predicted {
        Some(pred) => {
            // Unvalidated examples with no tables earn no table credit.
            let r_st = table_reward(&truth.tables, &pred.tables, cfg).unwrap_or(0.0);
            let r_sc = column_reward(&truth.columns, &pred.columns, cfg);
            (r_st, r_sc, false)
        }
        None => (0.0, 0.0, true),
    };
    let r_s = r_st + r_sc;
    let w = &cfg.weights;
    let total = w.format * r_f + w.marker * r_c + w.length * r_l + w.schema * r_s;
    RewardBreakdown {
        r_f,
        r_c,
        r_l,
        r_st,
        r_sc,
        r_s,
        total,
        parse_failed,
    }
}

/// Best achievable total for a question, found by enumerating every
/// (correct, wrong) count pair a prediction can have. Rewards depend only on
/// those counts, so this covers every subset of the candidate pool.
pub fn max_total_reward(
    truth: &SchemaLinkSet,
    n_tables: usize,
    n_columns: usize,
    cfg: &RewardConfig,
) -> f64 {
    let best = |truth_len: usize, pool: usize, rmax: f64, pmax: f64| {
        let wrong_pool = pool.saturating_sub(truth_len);
        let mut best = f64::NEG_INFINITY;
        for correct in 0..=truth_len {
            for wrong in 0..=wrong_pool {
                let gain = if truth_len == 0 {
                    0.0
                } else if cfg.literal_set_difference_mode {
                    rmax / truth_len as f64 * (truth_len - correct) as f64
                } else {
                    rmax / truth_len as f64 * correct as f64
                };
                let n = correct + wrong;
                let loss = if n == 0 {
                    0.0
                } else {
                    pmax / n as f64 * wrong as f64
                };
                best = best.max(gain - loss);
            }
        }
        best
    };
    let w = &cfg.weights;
    let st = best(truth.tables.len(), n_tables, cfg.r_tmax, cfg.p_tmax);
    let sc = best(truth.columns.len(), n_columns, cfg.r_cmax, cfg.p_cmax);
    w.format.max(0.0) + 2.0 * w.marker.max(0.0) + w.length.max(0.0) + w.schema * (st + sc)
}
