//! Token-level top-2 logit margins, their aggregation over an answer
//! region, and predictive entropy.
//!
//! Margins are taken on raw logits, so every threshold compared against them
//! is in logit units. Entropies are in nats.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::AnswerRegion;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("logit row needs at least 2 entries, got {0}")]
    InvalidVocabulary(usize),
    #[error("logit row contains NaN at index {0}")]
    NanLogit(usize),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("margin at position {pos} must be a nonnegative number, got {value}")]
    InvalidMargin { pos: usize, value: f64 },
    #[error("no value for answer-region position {0}")]
    MissingPosition(usize),
    #[error("quantile must lie strictly inside (0, 1), got {0}")]
    InvalidQuantile(f64),
}

/// Largest minus second-largest entry of a logit row.
pub fn token_margin(logit_row: &[f64]) -> Result<f64, ConfidenceError> {
    let (top1, top2) = top_two(logit_row)?;
    Ok(margin_of(top1, top2))
}

/// `top1 - top2`, with equal values (including equal infinities) mapped to 0.
pub fn margin_of(top1: f64, top2: f64) -> f64 {
    if top1 == top2 {
        0.0
    } else {
        top1 - top2
    }
}

/// Returns `(top1, top2)` of a row in a single pass.
pub fn top_two(row: &[f64]) -> Result<(f64, f64), ConfidenceError> {
    if row.len() < 2 {
        return Err(ConfidenceError::InvalidVocabulary(row.len()));
    }
    let mut top1 = f64::NEG_INFINITY;
    let mut top2 = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() {
            return Err(ConfidenceError::NanLogit(i));
        }
        if v > top1 {
            top2 = top1;
            top1 = v;
        } else if v > top2 {
            top2 = v;
        }
    }
    Ok((top1, top2))
}

/// Index of the first maximal entry.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Per-position top-2 margins `g_{t,i}`, all nonnegative.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    entries: BTreeMap<usize, f64>,
}

impl MarginVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = (usize, f64)>>(
        entries: I,
    ) -> Result<Self, ConfidenceError> {
        let mut out = Self::new();
        for (pos, value) in entries {
            out.insert(pos, value)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, pos: usize, margin: f64) -> Result<(), ConfidenceError> {
        if !(margin >= 0.0) {
            return Err(ConfidenceError::InvalidMargin { pos, value: margin });
        }
        self.entries.insert(pos, margin);
        Ok(())
    }

    pub fn get(&self, pos: usize) -> Option<f64> {
        self.entries.get(&pos).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }
}

/// How region margins are reduced to one confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Min,
    /// Nearest-rank quantile.
    Quantile(f64),
}

impl Aggregator {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        match *self {
            Aggregator::Quantile(q) if !(q > 0.0 && q < 1.0) => {
                Err(ConfidenceError::InvalidQuantile(q))
            }
            _ => Ok(()),
        }
    }
}

/// Reduces the margins at the region positions with `agg`.
pub fn aggregate(
    margins: &MarginVector,
    region: &AnswerRegion,
    agg: Aggregator,
) -> Result<f64, ConfidenceError> {
    agg.validate()?;
    let values = region
        .positions()
        .iter()
        .map(|&pos| {
            margins
                .get(pos)
                .ok_or(ConfidenceError::MissingPosition(pos))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    let n = values.len();
    Ok(match agg {
        Aggregator::Mean => values.iter().sum::<f64>() / n as f64,
        Aggregator::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Quantile(q) => {
            let mut sorted = values;
            sorted.sort_by(f64::total_cmp);
            let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
            sorted[rank - 1]
        }
    })
}

/// Shannon entropy (nats) of a probability row, renormalized before use.
pub fn token_entropy(prob_row: &[f64]) -> Result<f64, ConfidenceError> {
    let mut total = 0.0;
    for (i, &p) in prob_row.iter().enumerate() {
        if !(p >= 0.0) || !p.is_finite() {
            return Err(ConfidenceError::InvalidDistribution(format!(
                "entry {i} is {p}"
            )));
        }
        total += p;
    }
    if !(total > 0.0) {
        return Err(ConfidenceError::InvalidDistribution(
            "row sums to zero".into(),
        ));
    }
    let h: f64 = prob_row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Mean of [`token_entropy`] over the region positions.
pub fn mean_entropy<R: AsRef<[f64]>>(
    rows: &BTreeMap<usize, R>,
    region: &AnswerRegion,
) -> Result<f64, ConfidenceError> {
    let mut sum = 0.0;
    for &pos in region.positions() {
        let row = rows
            .get(&pos)
            .ok_or(ConfidenceError::MissingPosition(pos))?;
        sum += token_entropy(row.as_ref())?;
    }
    Ok(sum / region.len() as f64)
}

/// Softmax of a logit row, numerically stabilized by the row maximum.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
