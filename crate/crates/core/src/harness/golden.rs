//! Recomputing QPS from reported (score, speedup) averages.

use std::io::Read;

use serde::{Deserialize, Serialize};

use super::metrics::qps;
use super::HarnessError;

/// Dream Base and Instruct averages with their reported QPS at gamma = 4.
pub const DREAM_QPS_REFERENCE: &str = include_str!("../../data/dream_qps_reference.csv");

/// Default absolute tolerance; reported values are rounded to two decimals.
pub const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpsRow {
    #[serde(default)]
    pub model: String,
    pub variant: String,
    pub score: f64,
    pub speedup: f64,
    pub baseline_score: f64,
    #[serde(default)]
    pub expected_qps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QpsCheck {
    pub model: String,
    pub variant: String,
    pub qps: f64,
    pub expected_qps: Option<f64>,
    /// `None` when there is nothing to compare against.
    pub within_tolerance: Option<bool>,
}

pub fn read_qps_rows<R: Read>(input: R) -> Result<Vec<QpsRow>, HarnessError> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<Result<Vec<QpsRow>, _>>()
        .map_err(|e| HarnessError::Config(format!("qps table: {e}")))
}

pub fn check_qps_rows(
    rows: &[QpsRow],
    gamma: f64,
    tolerance: f64,
) -> Result<Vec<QpsCheck>, HarnessError> {
    rows.iter()
        .map(|r| {
            let value = qps(r.speedup, r.score, r.baseline_score, gamma)?;
            Ok(QpsCheck {
                model: r.model.clone(),
                variant: r.variant.clone(),
                qps: value,
                expected_qps: r.expected_qps,
                within_tolerance: r.expected_qps.map(|e| (value - e).abs() <= tolerance),
            })
        })
        .collect()
}
