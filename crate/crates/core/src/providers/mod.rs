//! Sources of per-position decoding evidence.
//!
//! A [`LogitProvider`] answers one query per reverse step with a
//! [`LogitBundle`]: argmax token and top-2 logits for every generation
//! position, plus an optional probability row and entropy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confidence::{self, ConfidenceError};
use crate::diffusion::{Canvas, DiffusionError, TokenId, Vocabulary};

pub mod ngram;
pub mod oracle;
pub mod wire;

pub use ngram::NGramProvider;
pub use oracle::{MarginGrowth, OracleConfig, OracleProvider};
pub use wire::{WireClient, WirePool};

/// Tolerance for matching a reported entropy against its row.
pub const ENTROPY_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
    #[error("invalid logit bundle: {0}")]
    InvalidBundle(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Confidence(#[from] ConfidenceError),
}

impl From<std::io::Error> for ProviderError {
    fn from(err: std::io::Error) -> Self {
        ProviderError::Transport(err.to_string())
    }
}

/// Evidence for one generation position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLogits {
    #[serde(rename = "i")]
    pub index: usize,
    pub argmax: TokenId,
    pub top1: f64,
    pub top2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    /// Probability row over the real vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<Vec<f64>>,
}

impl PositionLogits {
    pub fn margin(&self) -> f64 {
        confidence::margin_of(self.top1, self.top2)
    }

    /// Entropy as reported, or computed from the row when only that is present.
    pub fn entropy_or_row(&self) -> Option<f64> {
        self.entropy.or_else(|| {
            self.row
                .as_deref()
                .and_then(|r| confidence::token_entropy(r).ok())
        })
    }
}

/// One step's evidence, ordered by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBundle {
    pub positions: Vec<PositionLogits>,
}

impl LogitBundle {
    pub fn new(mut positions: Vec<PositionLogits>) -> Self {
        positions.sort_by_key(|p| p.index);
        Self { positions }
    }

    pub fn get(&self, index: usize) -> Option<&PositionLogits> {
        self.positions
            .binary_search_by_key(&index, |p| p.index)
            .ok()
            .map(|i| &self.positions[i])
    }

    /// Checks coverage of `[0, gen_len)` and the per-position invariants.
    pub fn validate(&self, gen_len: usize, vocab: Vocabulary) -> Result<(), ProviderError> {
        if self.positions.len() != gen_len
            || self.positions.iter().enumerate().any(|(i, p)| p.index != i)
        {
            return Err(ProviderError::InvalidBundle(format!(
                "expected exactly positions 0..{gen_len}, got {} entries",
                self.positions.len()
            )));
        }
        for p in &self.positions {
            let at = p.index;
            if !vocab.is_real(p.argmax) {
                return Err(ProviderError::InvalidBundle(format!(
                    "position {at}: argmax {} is not a real token",
                    p.argmax
                )));
            }
            if p.top1.is_nan() || p.top2.is_nan() || p.top1 < p.top2 {
                return Err(ProviderError::InvalidBundle(format!(
                    "position {at}: top1 {} < top2 {}",
                    p.top1, p.top2
                )));
            }
            if let Some(h) = p.entropy {
                if !(h >= 0.0) {
                    return Err(ProviderError::InvalidBundle(format!(
                        "position {at}: negative entropy {h}"
                    )));
                }
            }
            if let Some(row) = &p.row {
                if row.len() != vocab.size() as usize {
                    return Err(ProviderError::InvalidBundle(format!(
                        "position {at}: row has {} entries for vocabulary of {}",
                        row.len(),
                        vocab.size()
                    )));
                }
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if row[p.argmax as usize] < best {
                    return Err(ProviderError::InvalidBundle(format!(
                        "position {at}: argmax {} is not a maximizer of the row",
                        p.argmax
                    )));
                }
                let row_h = confidence::token_entropy(row)?;
                if let Some(h) = p.entropy {
                    if (h - row_h).abs() > ENTROPY_TOLERANCE {
                        return Err(ProviderError::InvalidBundle(format!(
                            "position {at}: entropy {h} disagrees with row entropy {row_h}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Optional payloads requested alongside the top-2 summary.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOptions {
    pub want_full: bool,
    pub want_entropy: bool,
}

/// Source of logits for a canvas at its current step.
pub trait LogitProvider: Send + Sync {
    fn vocab(&self) -> Vocabulary;

    /// Evidence for every generation position of `canvas` at `canvas.step()`.
    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError>;

    /// Whether `query` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }

    fn name(&self) -> String {
        "provider".to_string()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        (**self).query(canvas, opts)
    }

    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for std::sync::Arc<P> {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        (**self).query(canvas, opts)
    }

    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Builds the evidence for a position from a full logit row.
pub fn position_from_logits(
    index: usize,
    logits: &[f64],
    opts: QueryOptions,
) -> Result<PositionLogits, ProviderError> {
    let (top1, top2) = confidence::top_two(logits)?;
    let argmax = confidence::argmax(logits)
        .ok_or_else(|| ProviderError::InvalidBundle("empty logit row".into()))?;
    let needs_probs = opts.want_full || opts.want_entropy;
    let probs = needs_probs.then(|| confidence::softmax(logits));
    let entropy = match (&probs, opts.want_entropy) {
        (Some(p), true) => Some(confidence::token_entropy(p)?),
        _ => None,
    };
    Ok(PositionLogits {
        index,
        argmax: argmax as TokenId,
        top1,
        top2,
        entropy,
        row: if opts.want_full { probs } else { None },
    })
}

/// Fraction of positions where `decoded` agrees with `truth`.
pub fn oracle_truth_accuracy(decoded: &[TokenId], truth: &[TokenId]) -> Result<f64, ProviderError> {
    if decoded.len() != truth.len() {
        return Err(ProviderError::InvalidBundle(format!(
            "decoded length {} differs from truth length {}",
            decoded.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(1.0);
    }
    let hits = decoded.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::with_trailing_mask(4).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(oracle_truth_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(oracle_truth_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(
            oracle_truth_accuracy(&[1, 1, 1, 1, 0, 0, 0, 0], &[1; 8]).unwrap(),
            0.5
        );
        assert!(oracle_truth_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn position_from_logits_fills_requested_fields() {
        let opts = QueryOptions {
            want_full: true,
            want_entropy: true,
        };
        let p = position_from_logits(0, &[0.0, 3.0, 1.0, 1.0], opts).unwrap();
        assert_eq!(p.argmax, 1);
        assert_eq!(p.margin(), 2.0);
        let row = p.row.as_ref().unwrap();
        let h = confidence::token_entropy(row).unwrap();
        assert_eq!(p.entropy, Some(h));
        LogitBundle::new(vec![p]).validate(1, vocab()).unwrap();

        let bare = position_from_logits(0, &[0.0, 3.0, 1.0, 1.0], QueryOptions::default()).unwrap();
        assert!(bare.row.is_none() && bare.entropy.is_none());
    }

    #[test]
    fn bundle_validation_catches_violations() {
        let good = PositionLogits {
            index: 0,
            argmax: 2,
            top1: 2.0,
            top2: 1.0,
            entropy: None,
            row: None,
        };
        let bundle = LogitBundle::new(vec![good.clone()]);
        assert!(bundle.validate(1, vocab()).is_ok());
        assert!(bundle.validate(2, vocab()).is_err());

        let inverted = PositionLogits {
            top1: 0.0,
            ..good.clone()
        };
        assert!(LogitBundle::new(vec![inverted])
            .validate(1, vocab())
            .is_err());

        let mask_argmax = PositionLogits {
            argmax: 4,
            ..good.clone()
        };
        assert!(LogitBundle::new(vec![mask_argmax])
            .validate(1, vocab())
            .is_err());

        let wrong_max = PositionLogits {
            row: Some(vec![0.7, 0.1, 0.1, 0.1]),
            ..good.clone()
        };
        assert!(LogitBundle::new(vec![wrong_max])
            .validate(1, vocab())
            .is_err());

        let bad_entropy = PositionLogits {
            argmax: 0,
            row: Some(vec![0.7, 0.1, 0.1, 0.1]),
            entropy: Some(0.1),
            ..good
        };
        assert!(LogitBundle::new(vec![bad_entropy])
            .validate(1, vocab())
            .is_err());
    }
}
