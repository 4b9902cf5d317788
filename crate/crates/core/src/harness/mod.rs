//! Benchmark runner, metrics, and run configuration.

use thiserror::Error;

use crate::engine::EngineError;
use crate::providers::ProviderError;

pub mod config;
pub mod golden;
pub mod metrics;
pub mod runner;

pub use config::{preset, Preset, ProviderSpec, RunConfig, Sample, SampleSource, PRESETS};
pub use metrics::{entropy_curves, qps, speedup, EntropyCurve, EntropyPoint};
pub use runner::{Benchmark, RunRecord, Summary, SweepReport};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Provider(ProviderError),
    #[error(transparent)]
    Engine(EngineError),
    #[error("output error: {0}")]
    Output(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ProviderError> for HarnessError {
    fn from(err: ProviderError) -> Self {
        match err {
            ProviderError::Config(msg) => HarnessError::Config(msg),
            other => HarnessError::Provider(other),
        }
    }
}

impl From<EngineError> for HarnessError {
    fn from(err: EngineError) -> Self {
        match err {
            EngineError::Provider { source, .. } if !matches!(source, ProviderError::Config(_)) => {
                HarnessError::Provider(source)
            }
            other => HarnessError::Engine(other),
        }
    }
}
