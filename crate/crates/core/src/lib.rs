//! Masked-diffusion decoding with schedule-based early exit.
//!
//! The decoder in [`engine`] runs a reverse masking process over a canvas,
//! querying a [`providers::LogitProvider`] once per step. After each query it
//! aggregates top-2 logit margins over the answer region and compares them
//! with a progress-dependent threshold from [`schedules`]. Once the margin
//! clears the threshold, every remaining mask is filled in one go. The
//! [`harness`] sweeps schedules over a benchmark and reports quality, speedup
//! and their combined score.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod confidence;
pub mod diffusion;
pub mod engine;
pub mod harness;
pub mod providers;
pub mod schedules;

pub use confidence::{Aggregator, MarginVector};
pub use diffusion::{
    AnswerRegion, BasePolicy, Canvas, MaskingProcess, TokenId, TransferPolicy, Vocabulary,
};
pub use engine::{decode, CommitMode, DecodeParams, DecodeResult, StepRecord, StopPolicy};
pub use providers::{LogitBundle, LogitProvider, PositionLogits, QueryOptions};
pub use schedules::{ScheduleFamily, ThresholdSchedule};
