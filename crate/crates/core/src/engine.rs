//! The reverse-diffusion decode loop with pluggable stopping rules.
//!
//! Each step queries the provider, aggregates top-2 margins over the answer
//! region, and tests the stop policy at progress `p = t/T` before any
//! position is committed. On a trigger every remaining mask is filled with
//! the current argmax. Otherwise the transfer policy picks positions to
//! commit and the loop continues until no masks remain or the budget runs
//! out; the final step commits everything still masked.

use std::collections::BTreeMap;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{self, Aggregator, ConfidenceError, MarginVector};
use crate::diffusion::{
    select_positions, AnswerRegion, Canvas, DiffusionError, TokenId, TransferPolicy,
};
use crate::providers::{LogitBundle, LogitProvider, ProviderError, QueryOptions};
use crate::schedules::{ScheduleError, ThresholdSchedule};

/// Default constant threshold of the hard-threshold baseline (logit units).
pub const HARD_THRESHOLD_DEFAULT_TAU: f64 = 3.0;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("provider failed at step {step}: {source}")]
    Provider {
        step: usize,
        #[source]
        source: ProviderError,
    },
    #[error("step {t} is out of range [1, {budget}]")]
    ProgressOutOfRange { t: usize, budget: usize },
    #[error("invalid stop policy: {0}")]
    InvalidStop(String),
    #[error("contract violation at step {step}: {message}")]
    Contract { step: usize, message: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
}

/// When to stop decoding early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopPolicy {
    /// Run the full budget.
    Never,
    /// Exit once the aggregated margin reaches the scheduled threshold.
    Sched {
        schedule: ThresholdSchedule,
        #[serde(default)]
        aggregator: Aggregator,
    },
    /// Constant threshold on the mean margin, active after a warmup fraction
    /// of the budget.
    HardThreshold {
        #[serde(default = "default_hard_tau")]
        tau: f64,
        #[serde(default)]
        warmup_fraction: f64,
    },
}

fn default_hard_tau() -> f64 {
    HARD_THRESHOLD_DEFAULT_TAU
}

impl StopPolicy {
    pub fn sched(schedule: ThresholdSchedule) -> Self {
        StopPolicy::Sched {
            schedule,
            aggregator: Aggregator::Mean,
        }
    }

    pub fn hard_threshold_default() -> Self {
        StopPolicy::HardThreshold {
            tau: HARD_THRESHOLD_DEFAULT_TAU,
            warmup_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        match self {
            StopPolicy::Never => Ok(()),
            StopPolicy::Sched {
                schedule,
                aggregator,
            } => {
                schedule.validate()?;
                aggregator.validate()?;
                Ok(())
            }
            StopPolicy::HardThreshold {
                tau,
                warmup_fraction,
            } => {
                if tau.is_nan() {
                    return Err(EngineError::InvalidStop("tau is NaN".into()));
                }
                if !(0.0..1.0).contains(warmup_fraction) {
                    return Err(EngineError::InvalidStop(format!(
                        "warmup_fraction {warmup_fraction} outside [0, 1)"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn aggregator(&self) -> Aggregator {
        match self {
            StopPolicy::Sched { aggregator, .. } => *aggregator,
            _ => Aggregator::Mean,
        }
    }

    /// Threshold in force at progress `p`, if the policy has one.
    pub fn threshold_at(&self, p: f64) -> Result<Option<f64>, EngineError> {
        Ok(match self {
            StopPolicy::Never => None,
            StopPolicy::Sched { schedule, .. } => Some(schedule.threshold(p)?),
            StopPolicy::HardThreshold {
                tau,
                warmup_fraction,
            } => Some(if p >= *warmup_fraction {
                *tau
            } else {
                f64::INFINITY
            }),
        })
    }
}

/// Normalized progress `t / T` for `1 <= t <= T`.
pub fn progress(t: usize, budget: usize) -> Result<f64, EngineError> {
    if t == 0 || t > budget {
        return Err(EngineError::ProgressOutOfRange { t, budget });
    }
    Ok(t as f64 / budget as f64)
}

/// Whether `stop` fires for aggregated margin `g_bar` at progress `p`.
pub fn evaluate_stop(stop: &StopPolicy, g_bar: f64, p: f64) -> Result<bool, EngineError> {
    stop.validate()?;
    Ok(match stop {
        StopPolicy::Never => false,
        StopPolicy::Sched { schedule, .. } => g_bar >= schedule.threshold(p)?,
        StopPolicy::HardThreshold {
            tau,
            warmup_fraction,
        } => p >= *warmup_fraction && g_bar >= *tau,
    })
}

/// How a selected position receives its token.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitMode {
    #[default]
    Argmax,
    /// Categorical draw from the provider's distribution sharpened or
    /// flattened by `temperature`.
    Sample { temperature: f64 },
}

/// Everything a decode needs besides the provider and prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub gen_len: usize,
    pub budget: usize,
    pub transfer: TransferPolicy,
    pub stop: StopPolicy,
    /// Defaults to the whole generation region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<AnswerRegion>,
    #[serde(default)]
    pub commit_mode: CommitMode,
    #[serde(default)]
    pub record_entropy: bool,
}

impl DecodeParams {
    pub fn new(gen_len: usize, budget: usize, transfer: TransferPolicy, stop: StopPolicy) -> Self {
        Self {
            gen_len,
            budget,
            transfer,
            stop,
            region: None,
            commit_mode: CommitMode::Argmax,
            record_entropy: false,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.gen_len == 0 || self.budget == 0 {
            return Err(EngineError::Contract {
                step: 0,
                message: "gen_len and budget must be positive".into(),
            });
        }
        self.transfer.validate()?;
        self.stop.validate()?;
        if let Some(region) = &self.region {
            region.check_within(self.gen_len)?;
        }
        if let CommitMode::Sample { temperature } = self.commit_mode {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(EngineError::Contract {
                    step: 0,
                    message: format!("sampling temperature must be positive, got {temperature}"),
                });
            }
        }
        Ok(())
    }

    fn resolved_region(&self) -> Result<AnswerRegion, EngineError> {
        match &self.region {
            Some(r) => Ok(r.clone()),
            None => Ok(AnswerRegion::full(self.gen_len)?),
        }
    }
}

/// Per-step record of the decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub progress: f64,
    /// Aggregated margin over the answer region.
    pub aggregate_margin: f64,
    /// Threshold compared against; absent for [`StopPolicy::Never`].
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_entropy: Option<f64>,
    /// Masks present when the step's logits were requested.
    pub masked_remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub tokens: Vec<TokenId>,
    pub steps_used: usize,
    pub exit_step: Option<usize>,
    pub trajectory: Vec<StepRecord>,
}

impl DecodeResult {
    /// Checks the result-level invariants: no masks, trajectory length, and
    /// that a recorded exit actually met its threshold.
    pub fn check_invariants(&self, mask_id: TokenId, budget: usize) -> Result<(), String> {
        if self.tokens.contains(&mask_id) {
            return Err("output contains the mask".into());
        }
        if self.steps_used == 0 || self.steps_used > budget {
            return Err(format!(
                "steps_used {} outside [1, {budget}]",
                self.steps_used
            ));
        }
        if self.trajectory.len() != self.steps_used {
            return Err("trajectory length differs from steps_used".into());
        }
        if let Some(exit) = self.exit_step {
            if exit != self.steps_used {
                return Err("exit_step differs from steps_used".into());
            }
            let rec = &self.trajectory[exit - 1];
            match rec.threshold {
                Some(tau) if rec.aggregate_margin >= tau => {}
                _ => return Err(format!("exit at step {exit} without meeting the threshold")),
            }
        }
        Ok(())
    }
}

/// Runs one decode of `gen_len` tokens after `prompt`.
pub fn decode<P: LogitProvider + ?Sized>(
    provider: &P,
    prompt: &[TokenId],
    params: &DecodeParams,
    seed: u64,
) -> Result<DecodeResult, EngineError> {
    params.validate()?;
    let vocab = provider.vocab();
    let region = params.resolved_region()?;
    let aggregator = params.stop.aggregator();
    let sampling = matches!(params.commit_mode, CommitMode::Sample { .. });
    let opts = QueryOptions {
        want_full: sampling,
        want_entropy: params.record_entropy,
    };
    let mut canvas = Canvas::new(vocab, prompt.to_vec(), params.gen_len, params.budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = Vec::with_capacity(params.budget);

    for t in 1..=params.budget {
        canvas.set_step(t)?;
        let bundle = provider
            .query(&canvas, opts)
            .map_err(|source| EngineError::Provider { step: t, source })?;
        bundle
            .validate(params.gen_len, vocab)
            .map_err(|source| EngineError::Provider { step: t, source })?;

        let margins =
            MarginVector::from_entries(bundle.positions.iter().map(|p| (p.index, p.margin())))?;
        let g_bar = confidence::aggregate(&margins, &region, aggregator)?;
        let p = progress(t, params.budget)?;
        let threshold = params.stop.threshold_at(p)?;
        let mean_entropy = if params.record_entropy {
            region_entropy(&bundle, &region)
        } else {
            None
        };
        trajectory.push(StepRecord {
            step: t,
            progress: p,
            aggregate_margin: g_bar,
            threshold,
            mean_entropy,
            masked_remaining: canvas.masked_count(),
        });

        if evaluate_stop(&params.stop, g_bar, p)? {
            for pos in canvas.masked_positions() {
                let tok = bundle.positions[pos].argmax;
                canvas.commit(pos, tok)?;
            }
            return Ok(DecodeResult {
                tokens: canvas.into_gen(),
                steps_used: t,
                exit_step: Some(t),
                trajectory,
            });
        }

        let selected = if t == params.budget {
            canvas.masked_positions()
        } else {
            select_positions(&params.transfer, &canvas, &margins)?
        };
        if selected.is_empty() && canvas.masked_count() > 0 {
            return Err(EngineError::Contract {
                step: t,
                message: "transfer policy selected nothing while masks remain".into(),
            });
        }
        for pos in selected {
            let tok = match params.commit_mode {
                CommitMode::Argmax => bundle.positions[pos].argmax,
                CommitMode::Sample { temperature } => {
                    sample_token(&bundle, pos, temperature, &mut rng, t)?
                }
            };
            canvas.commit(pos, tok)?;
        }
        if canvas.masked_count() == 0 {
            return Ok(DecodeResult {
                tokens: canvas.into_gen(),
                steps_used: t,
                exit_step: None,
                trajectory,
            });
        }
    }
    unreachable!("the final step commits every remaining mask")
}

/// Mean entropy over the region, or `None` if any position lacks one.
fn region_entropy(bundle: &LogitBundle, region: &AnswerRegion) -> Option<f64> {
    let values: BTreeMap<usize, f64> = region
        .positions()
        .iter()
        .map(|&pos| {
            bundle
                .get(pos)
                .and_then(|p| p.entropy_or_row())
                .map(|h| (pos, h))
        })
        .collect::<Option<_>>()?;
    Some(values.values().sum::<f64>() / values.len() as f64)
}

fn sample_token(
    bundle: &LogitBundle,
    pos: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<TokenId, EngineError> {
    let row = bundle.positions[pos]
        .row
        .as_ref()
        .ok_or_else(|| EngineError::Contract {
            step,
            message: format!("sampling needs a probability row at position {pos}"),
        })?;
    // p^(1/T), computed in log space against the row maximum.
    let max_ln = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row
        .iter()
        .map(|&p| {
            if p > 0.0 {
                ((p.ln() - max_ln) / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| EngineError::Contract {
        step,
        message: format!("cannot sample position {pos}: {e}"),
    })?;
    Ok(dist.sample(rng) as TokenId)
}
