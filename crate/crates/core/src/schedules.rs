//! Progress-dependent confidence thresholds `tau(p)`.
//!
//! All three families start at `tau_high` when `p = 0` and never increase.
//! Linear and cosine land on `tau_low` at `p = 1`; the exponential family is
//! kept in its raw form and stops at `tau_low + (tau_high - tau_low) e^{-k}`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("tau_low ({tau_low}) exceeds tau_high ({tau_high})")]
    Ordering { tau_high: f64, tau_low: f64 },
    #[error("exponential slope k must be positive, got {0:?}")]
    Slope(Option<f64>),
    #[error("threshold bounds must be numbers (infinite only for a flat schedule)")]
    NonFinite,
    #[error("progress {0} is outside [0, 1]")]
    ProgressOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Linear,
    Cosine,
    Exponential,
}

/// `tau(p)` parameterized by family and its logit-unit bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub family: ScheduleFamily,
    pub tau_high: f64,
    pub tau_low: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

impl ThresholdSchedule {
    pub fn linear(tau_high: f64, tau_low: f64) -> Self {
        Self {
            family: ScheduleFamily::Linear,
            tau_high,
            tau_low,
            k: None,
        }
    }

    pub fn cosine(tau_high: f64, tau_low: f64) -> Self {
        Self {
            family: ScheduleFamily::Cosine,
            tau_high,
            tau_low,
            k: None,
        }
    }

    pub fn exponential(tau_high: f64, tau_low: f64, k: f64) -> Self {
        Self {
            family: ScheduleFamily::Exponential,
            tau_high,
            tau_low,
            k: Some(k),
        }
    }

    /// A flat `+inf` threshold: no finite confidence ever reaches it.
    pub fn unreachable() -> Self {
        Self::linear(f64::INFINITY, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let flat_infinite = self.tau_high == self.tau_low && self.tau_high == f64::INFINITY;
        if !flat_infinite && !(self.tau_high.is_finite() && self.tau_low.is_finite()) {
            return Err(ScheduleError::NonFinite);
        }
        if self.tau_low > self.tau_high {
            return Err(ScheduleError::Ordering {
                tau_high: self.tau_high,
                tau_low: self.tau_low,
            });
        }
        if self.family == ScheduleFamily::Exponential {
            match self.k {
                Some(k) if k > 0.0 && k.is_finite() => {}
                other => return Err(ScheduleError::Slope(other)),
            }
        }
        Ok(())
    }

    /// Evaluates `tau(p)` for `p` in `[0, 1]`.
    pub fn threshold(&self, p: f64) -> Result<f64, ScheduleError> {
        self.validate()?;
        if !(0.0..=1.0).contains(&p) {
            return Err(ScheduleError::ProgressOutOfRange(p));
        }
        let (hi, lo) = (self.tau_high, self.tau_low);
        if hi == lo || p == 0.0 {
            return Ok(hi);
        }
        let raw = match self.family {
            ScheduleFamily::Linear => {
                if p == 1.0 {
                    return Ok(lo);
                }
                hi + (lo - hi) * p
            }
            ScheduleFamily::Cosine => {
                if p == 1.0 {
                    return Ok(lo);
                }
                lo + 0.5 * (hi - lo) * (1.0 + (PI * p).cos())
            }
            ScheduleFamily::Exponential => {
                let k = self.k.expect("validated");
                lo + (hi - lo) * (-k * p).exp()
            }
        };
        // Rounding can step an ulp outside the bounds; clamping keeps the
        // trajectory monotone.
        Ok(raw.clamp(lo, hi))
    }

    /// Short label such as `Exp-k=16 (7.5,0)`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ThresholdSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            ScheduleFamily::Linear => write!(f, "Linear")?,
            ScheduleFamily::Cosine => write!(f, "Cosine")?,
            ScheduleFamily::Exponential => write!(f, "Exp-k={}", self.k.map_or(f64::NAN, |k| k))?,
        }
        write!(f, " ({},{})", self.tau_high, self.tau_low)
    }
}

/// The eight schedule variants (four families, two lower thresholds) with a
/// shared upper threshold.
pub fn standard_grid(tau_high: f64) -> Vec<ThresholdSchedule> {
    let mut grid = Vec::with_capacity(8);
    for tau_low in [0.0, 2.5] {
        grid.push(ThresholdSchedule::cosine(tau_high, tau_low));
        grid.push(ThresholdSchedule::linear(tau_high, tau_low));
        grid.push(ThresholdSchedule::exponential(tau_high, tau_low, 2.0));
        grid.push(ThresholdSchedule::exponential(tau_high, tau_low, 16.0));
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        assert_eq!(
            ThresholdSchedule::linear(7.5, 0.0).threshold(0.5).unwrap(),
            3.75
        );
        let cos = ThresholdSchedule::cosine(7.5, 2.5).threshold(0.5).unwrap();
        assert!((cos - 5.0).abs() < 1e-12);
        let exp = ThresholdSchedule::exponential(7.5, 2.5, 2.0)
            .threshold(1.0)
            .unwrap();
        assert!((exp - (2.5 + 5.0 * (-2.0f64).exp())).abs() < 1e-12);
        assert!((exp - 3.17668).abs() < 1e-5);
        for s in [
            ThresholdSchedule::linear(7.5, 0.0),
            ThresholdSchedule::cosine(7.5, 0.0),
            ThresholdSchedule::exponential(7.5, 0.0, 16.0),
        ] {
            assert_eq!(s.threshold(0.0).unwrap(), 7.5);
        }
    }

    #[test]
    fn validation() {
        assert!(ThresholdSchedule::linear(7.5, 2.5).validate().is_ok());
        assert!(matches!(
            ThresholdSchedule::linear(2.5, 7.5).validate(),
            Err(ScheduleError::Ordering { .. })
        ));
        assert!(matches!(
            ThresholdSchedule::exponential(7.5, 0.0, 0.0).validate(),
            Err(ScheduleError::Slope(Some(_)))
        ));
        let mut missing_k = ThresholdSchedule::exponential(7.5, 0.0, 1.0);
        missing_k.k = None;
        assert!(matches!(
            missing_k.validate(),
            Err(ScheduleError::Slope(None))
        ));
        assert!(ThresholdSchedule::linear(f64::INFINITY, 0.0)
            .validate()
            .is_err());
        assert!(ThresholdSchedule::unreachable().validate().is_ok());
    }

    #[test]
    fn progress_range_checked() {
        let s = ThresholdSchedule::linear(7.5, 0.0);
        assert!(s.threshold(-0.01).is_err());
        assert!(s.threshold(1.01).is_err());
        assert!(s.threshold(f64::NAN).is_err());
    }

    #[test]
    fn unreachable_is_infinite_everywhere() {
        let s = ThresholdSchedule::unreachable();
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(s.threshold(p).unwrap(), f64::INFINITY);
        }
    }

    #[test]
    fn grid_shape() {
        let grid = standard_grid(7.5);
        assert_eq!(grid.len(), 8);
        assert!(grid
            .iter()
            .all(|s| s.tau_high == 7.5 && s.validate().is_ok()));
        assert_eq!(grid[3].label(), "Exp-k=16 (7.5,0)");
    }

    fn schedule_strategy() -> impl Strategy<Value = ThresholdSchedule> {
        (0usize..3, -20.0f64..20.0, 0.0f64..20.0, 0.001f64..32.0).prop_map(
            |(family, low, span, k)| match family {
                0 => ThresholdSchedule::linear(low + span, low),
                1 => ThresholdSchedule::cosine(low + span, low),
                _ => ThresholdSchedule::exponential(low + span, low, k),
            },
        )
    }

    proptest! {
        #[test]
        fn nonincreasing_and_bounded(s in schedule_strategy(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (p1, p2) = if a <= b { (a, b) } else { (b, a) };
            let t1 = s.threshold(p1).unwrap();
            let t2 = s.threshold(p2).unwrap();
            prop_assert!(t1 >= t2);
            prop_assert!(t1 <= s.tau_high && t2 >= s.tau_low);
        }

        #[test]
        fn flat_schedule_is_constant(level in -10.0f64..10.0, p in 0.0f64..=1.0, k in 0.1f64..32.0) {
            for s in [
                ThresholdSchedule::linear(level, level),
                ThresholdSchedule::cosine(level, level),
                ThresholdSchedule::exponential(level, level, k),
            ] {
                prop_assert_eq!(s.threshold(p).unwrap(), level);
            }
        }
    }
}
