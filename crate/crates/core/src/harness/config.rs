//! Run configuration, benchmark presets, and sample sources.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::DEFAULT_GAMMA;
use super::HarnessError;
use crate::confidence::Aggregator;
use crate::diffusion::{BasePolicy, TokenId, TransferPolicy, Vocabulary};
use crate::engine::{CommitMode, DecodeParams, StopPolicy};
use crate::providers::ngram::NGramConfig;
use crate::providers::{LogitProvider, NGramProvider, OracleConfig, WireClient, WirePool};
use crate::schedules::{standard_grid, ThresholdSchedule};

/// Environment variable that overrides the default seed.
pub const SEED_ENV: &str = "SCHED_SEED";

/// Decoding hyperparameters of a named benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Preset {
    pub name: &'static str,
    pub budget: usize,
    pub gen_len: usize,
    pub shots: usize,
    /// Block size for the block-diffusion decoder.
    pub block_size: usize,
}

pub const PRESETS: [Preset; 10] = [
    preset_row("mmlu", 5, 5, 5, 5),
    preset_row("hellaswag", 5, 5, 5, 5),
    preset_row("piqa", 5, 5, 5, 5),
    preset_row("winogrande", 5, 5, 5, 5),
    preset_row("gpqa", 128, 128, 8, 32),
    preset_row("gsm8k", 256, 256, 8, 32),
    preset_row("wmt14-en-fr", 256, 256, 5, 32),
    preset_row("wmt16-en-de", 256, 256, 5, 32),
    preset_row("multinews", 512, 512, 0, 32),
    preset_row("hotpotqa", 32, 32, 0, 32),
];

const fn preset_row(
    name: &'static str,
    budget: usize,
    gen_len: usize,
    shots: usize,
    block_size: usize,
) -> Preset {
    Preset {
        name,
        budget,
        gen_len,
        shots,
        block_size,
    }
}

pub fn preset(name: &str) -> Option<Preset> {
    let key = name.to_ascii_lowercase();
    PRESETS.iter().copied().find(|p| p.name == key)
}

/// Where logits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    /// One synthetic oracle per sample, built from the sample's truth.
    Oracle {
        vocab_size: u32,
        #[serde(default)]
        oracle: OracleConfig,
    },
    Ngram {
        vocab_size: u32,
        corpus: Vec<Vec<TokenId>>,
        #[serde(default = "default_smoothing")]
        smoothing: f64,
    },
    /// External server, spawned as a child speaking on stdio or reached
    /// over TCP.
    Wire {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<Vec<String>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        address: Option<String>,
        #[serde(default = "one")]
        connections: usize,
    },
}

fn one() -> usize {
    1
}

fn default_smoothing() -> f64 {
    0.1
}

impl ProviderSpec {
    pub fn vocab_size(&self) -> Option<u32> {
        match self {
            ProviderSpec::Oracle { vocab_size, .. } => Some(*vocab_size),
            ProviderSpec::Ngram { vocab_size, .. } => Some(*vocab_size),
            ProviderSpec::Wire { .. } => None,
        }
    }
}

/// Opened provider, ready for decoding.
pub enum ProviderHandle {
    PerSample {
        vocab: Vocabulary,
        config: OracleConfig,
    },
    Shared(Arc<dyn LogitProvider>),
}

impl ProviderHandle {
    pub fn open(spec: &ProviderSpec) -> Result<Self, HarnessError> {
        match spec {
            ProviderSpec::Oracle { vocab_size, oracle } => {
                oracle.validate()?;
                Ok(ProviderHandle::PerSample {
                    vocab: Vocabulary::with_trailing_mask(*vocab_size)
                        .map_err(|e| HarnessError::Config(e.to_string()))?,
                    config: oracle.clone(),
                })
            }
            ProviderSpec::Ngram {
                vocab_size,
                corpus,
                smoothing,
            } => {
                let model = NGramConfig {
                    vocab_size: *vocab_size,
                    corpus: corpus.clone(),
                    smoothing: *smoothing,
                };
                let p =
                    NGramProvider::new(&model).map_err(|e| HarnessError::Config(e.to_string()))?;
                Ok(ProviderHandle::Shared(Arc::new(p)))
            }
            ProviderSpec::Wire {
                command,
                address,
                connections,
            } => {
                if *connections == 0 {
                    return Err(HarnessError::Config("connections must be positive".into()));
                }
                let open_one = || -> Result<WireClient, HarnessError> {
                    match (command, address) {
                        (Some(cmd), None) if !cmd.is_empty() => {
                            Ok(WireClient::spawn(&cmd[0], &cmd[1..])?)
                        }
                        (None, Some(addr)) => Ok(WireClient::connect(addr.as_str())?),
                        _ => Err(HarnessError::Config(
                            "wire provider needs exactly one of a non-empty command or an address"
                                .into(),
                        )),
                    }
                };
                if *connections == 1 {
                    Ok(ProviderHandle::Shared(Arc::new(open_one()?)))
                } else {
                    let clients = (0..*connections)
                        .map(|_| open_one())
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(ProviderHandle::Shared(Arc::new(WirePool::new(clients)?)))
                }
            }
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        match self {
            ProviderHandle::PerSample { vocab, .. } => *vocab,
            ProviderHandle::Shared(p) => p.vocab(),
        }
    }

    pub fn concurrent_safe(&self) -> bool {
        match self {
            ProviderHandle::PerSample { .. } => true,
            ProviderHandle::Shared(p) => p.concurrent_safe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub prompt: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleSource {
    /// Random prompts and, for the oracle, random truths.
    Synthetic {
        count: usize,
        #[serde(default = "default_prompt_len")]
        prompt_len: usize,
        #[serde(default)]
        seed: u64,
    },
    /// JSON Lines of [`Sample`].
    File {
        path: PathBuf,
    },
    Inline {
        items: Vec<Sample>,
    },
}

fn default_prompt_len() -> usize {
    8
}

/// Grid of schedule variants sharing one upper threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_tau_high")]
    pub tau_high: f64,
    /// Also run the constant-threshold baseline.
    #[serde(default)]
    pub hard_threshold: bool,
}

fn default_tau_high() -> f64 {
    7.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, alias = "T", skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    /// Defaults to confidence-ordered unmasking, within blocks when a block
    /// size is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferPolicy>,
    #[serde(default)]
    pub stops: Vec<StopPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    /// Aggregator for schedules generated by `grid`.
    #[serde(default)]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub commit_mode: CommitMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub provider: ProviderSpec,
    pub samples: SampleSource,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub record_entropy: bool,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}

/// Shape parameters after applying the preset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Shape {
    pub budget: usize,
    pub gen_len: usize,
    pub block_size: Option<usize>,
    pub shots: Option<usize>,
    pub transfer: TransferPolicy,
}

impl RunConfig {
    /// Reads JSON, or TOML when the extension is `.toml`.
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Preset values, overridden field by field by explicit ones.
    pub fn shape(&self) -> Result<Shape, HarnessError> {
        let base = match &self.preset {
            Some(name) => Some(
                preset(name)
                    .ok_or_else(|| HarnessError::Config(format!("unknown preset {name:?}")))?,
            ),
            None => None,
        };
        let budget = self.budget.or(base.map(|p| p.budget)).ok_or_else(|| {
            HarnessError::Config("budget (T) is required without a preset".into())
        })?;
        let gen_len = self
            .gen_len
            .or(base.map(|p| p.gen_len))
            .ok_or_else(|| HarnessError::Config("gen_len is required without a preset".into()))?;
        if budget == 0 || gen_len == 0 {
            return Err(HarnessError::Config(
                "budget and gen_len must be positive".into(),
            ));
        }
        let block_size = self.block_size.or(base.map(|p| p.block_size));
        let shots = self.shots.or(base.map(|p| p.shots));
        let transfer = match &self.transfer {
            Some(t) => *t,
            None => default_transfer(gen_len, budget, block_size),
        };
        transfer
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Shape {
            budget,
            gen_len,
            block_size,
            shots,
            transfer,
        })
    }

    /// Explicit stop policies followed by the grid, if any.
    pub fn stop_policies(&self) -> Result<Vec<StopPolicy>, HarnessError> {
        let mut out = self.stops.clone();
        if let Some(grid) = self.grid {
            out.extend(standard_grid(grid.tau_high).into_iter().map(|schedule| {
                StopPolicy::Sched {
                    schedule,
                    aggregator: self.aggregator,
                }
            }));
            if grid.hard_threshold {
                out.push(StopPolicy::hard_threshold_default());
            }
        }
        for stop in &out {
            stop.validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(out)
    }

    /// Configured seeds, else the seed from `env_seed`, else 0.
    pub fn resolve_seeds(&self, env_seed: Option<&str>) -> Result<Vec<u64>, HarnessError> {
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(HarnessError::Config("seeds must not be empty".into()));
            }
            return Ok(seeds.clone());
        }
        match env_seed {
            Some(s) => s.trim().parse::<u64>().map(|v| vec![v]).map_err(|_| {
                HarnessError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer"))
            }),
            None => Ok(vec![0]),
        }
    }

    pub fn seeds_from_env(&self) -> Result<Vec<u64>, HarnessError> {
        self.resolve_seeds(std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.shape()?;
        self.stop_policies()?;
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(HarnessError::Config(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        if let CommitMode::Sample { temperature } = self.commit_mode {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(HarnessError::Config("temperature must be positive".into()));
            }
        }
        Ok(())
    }

    /// Decode parameters for one stop policy.
    pub fn decode_params(&self, stop: StopPolicy) -> Result<DecodeParams, HarnessError> {
        let shape = self.shape()?;
        Ok(DecodeParams {
            gen_len: shape.gen_len,
            budget: shape.budget,
            transfer: shape.transfer,
            stop,
            region: None,
            commit_mode: self.commit_mode,
            record_entropy: self.record_entropy,
        })
    }

    /// Materializes the samples; synthetic ones carry a truth only for the
    /// oracle provider.
    pub fn load_samples(&self) -> Result<Vec<Sample>, HarnessError> {
        let shape = self.shape()?;
        let samples = match &self.samples {
            SampleSource::Synthetic {
                count,
                prompt_len,
                seed,
            } => {
                let vocab_size = self.provider.vocab_size().ok_or_else(|| {
                    HarnessError::Config(
                        "synthetic samples need a provider with a known vocabulary".into(),
                    )
                })?;
                let with_truth = matches!(self.provider, ProviderSpec::Oracle { .. });
                synthetic_samples(
                    *count,
                    *prompt_len,
                    shape.gen_len,
                    vocab_size,
                    with_truth,
                    *seed,
                )
            }
            SampleSource::File { path } => read_samples(path)?,
            SampleSource::Inline { items } => items.clone(),
        };
        if samples.is_empty() {
            return Err(HarnessError::Config("no samples".into()));
        }
        for s in &samples {
            if let Some(truth) = &s.truth {
                if truth.len() != shape.gen_len {
                    return Err(HarnessError::Config(format!(
                        "sample {:?}: truth length {} differs from gen_len {}",
                        s.id,
                        truth.len(),
                        shape.gen_len
                    )));
                }
            }
        }
        let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("sample ids must be unique".into()));
        }
        Ok(samples)
    }
}

fn default_transfer(gen_len: usize, budget: usize, block_size: Option<usize>) -> TransferPolicy {
    let per_step = gen_len.div_ceil(budget).max(1);
    match block_size {
        Some(b) if b < gen_len => TransferPolicy::BlockDiffusion {
            block_size: b,
            inner: BasePolicy::LowConfidenceTopK { per_step },
        },
        _ => TransferPolicy::LowConfidenceTopK { per_step },
    }
}

pub fn synthetic_samples(
    count: usize,
    prompt_len: usize,
    gen_len: usize,
    vocab_size: u32,
    with_truth: bool,
    seed: u64,
) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = count.saturating_sub(1).to_string().len().max(4);
    (0..count)
        .map(|i| {
            let prompt = (0..prompt_len)
                .map(|_| rng.random_range(0..vocab_size))
                .collect();
            let truth = (0..gen_len)
                .map(|_| rng.random_range(0..vocab_size))
                .collect();
            Sample {
                id: format!("s{i:0width$}"),
                prompt,
                truth: with_truth.then_some(truth),
            }
        })
        .collect()
}

pub fn read_samples(path: &Path) -> Result<Vec<Sample>, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), n + 1)))
        })
        .collect()
}

/// Schedule parameters of a stop policy, for summary tables.
pub fn schedule_of(stop: &StopPolicy) -> Option<ThresholdSchedule> {
    match stop {
        StopPolicy::Sched { schedule, .. } => Some(*schedule),
        _ => None,
    }
}
