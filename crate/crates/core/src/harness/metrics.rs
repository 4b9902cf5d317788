//! Speedup, quality-penalized speed, and entropy curves.

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::engine::StepRecord;

/// Default quality-penalty exponent.
pub const DEFAULT_GAMMA: f64 = 4.0;

/// Step-count speedup `T / steps_used`.
pub fn speedup(budget: usize, steps_used: usize) -> Result<f64, HarnessError> {
    if steps_used == 0 || steps_used > budget {
        return Err(HarnessError::Contract(format!(
            "steps_used {steps_used} outside [1, {budget}]"
        )));
    }
    Ok(budget as f64 / steps_used as f64)
}

/// `speedup * (score / baseline_score)^gamma`.
pub fn qps(speedup: f64, score: f64, baseline_score: f64, gamma: f64) -> Result<f64, HarnessError> {
    if !(baseline_score > 0.0) || !baseline_score.is_finite() {
        return Err(HarnessError::Contract(format!(
            "baseline score must be positive, got {baseline_score}"
        )));
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(HarnessError::Contract(format!(
            "gamma must be >= 1, got {gamma}"
        )));
    }
    if !speedup.is_finite() || !score.is_finite() || score < 0.0 {
        return Err(HarnessError::Contract(format!(
            "speedup {speedup} and score {score} must be finite and nonnegative"
        )));
    }
    Ok(speedup * (score / baseline_score).powf(gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyPoint {
    pub step: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Trajectories contributing to this step.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "points", rename_all = "snake_case")]
pub enum EntropyCurve {
    NoData,
    Curve(Vec<EntropyPoint>),
}

impl EntropyCurve {
    pub fn points(&self) -> &[EntropyPoint] {
        match self {
            EntropyCurve::NoData => &[],
            EntropyCurve::Curve(points) => points,
        }
    }
}

/// Per-step mean and spread of the recorded mean entropy. A trajectory only
/// contributes to the steps it actually ran.
pub fn entropy_curves<'a, I>(trajectories: I) -> EntropyCurve
where
    I: IntoIterator<Item = &'a [StepRecord]>,
{
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for trajectory in trajectories {
        for rec in trajectory {
            if let Some(h) = rec.mean_entropy {
                if columns.len() < rec.step {
                    columns.resize_with(rec.step, Vec::new);
                }
                columns[rec.step - 1].push(h);
            }
        }
    }
    let points: Vec<EntropyPoint> = columns
        .iter()
        .enumerate()
        .filter(|(_, col)| !col.is_empty())
        .map(|(i, col)| {
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
            EntropyPoint {
                step: i + 1,
                mean,
                std: var.sqrt(),
                count: col.len(),
            }
        })
        .collect();
    if points.is_empty() {
        EntropyCurve::NoData
    } else {
        EntropyCurve::Curve(points)
    }
}
