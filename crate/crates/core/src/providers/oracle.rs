//! Synthetic provider with controllable margin and entropy dynamics.
//!
//! Every position `i` has a readiness `r_i = min(1, x + d_i)`, where `x` is
//! the growth driver (unmasked fraction of the canvas, or `t/T`) and `d_i` a
//! per-position offset drawn once from `U(0, readiness_spread)`. The margin is
//! `m0 + (m1 - m0) r_i` plus Gaussian noise, floored at `m0`. A position is
//! stable once `r_i >= rho`; before that, positions flagged as distractors
//! (probability `epsilon`, drawn once) report a wrong argmax. Entropy is
//! `ln|V| * exp(-entropy_decay * r_i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LogitBundle, LogitProvider, PositionLogits, ProviderError, QueryOptions};
use crate::diffusion::{Canvas, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginGrowth {
    LinearInUnmaskedFraction,
    StepCountLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub margin_floor: f64,
    pub margin_ceil: f64,
    #[serde(default = "default_growth")]
    pub growth: MarginGrowth,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub distractor_error_rate: f64,
    #[serde(default = "default_stabilization")]
    pub stabilization: f64,
    #[serde(default = "default_spread")]
    pub readiness_spread: f64,
    #[serde(default = "default_entropy_decay")]
    pub entropy_decay: f64,
}

fn default_growth() -> MarginGrowth {
    MarginGrowth::LinearInUnmaskedFraction
}

fn default_stabilization() -> f64 {
    1.0
}

fn default_spread() -> f64 {
    1.0
}

fn default_entropy_decay() -> f64 {
    4.0
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            margin_floor: 0.0,
            margin_ceil: 10.0,
            growth: default_growth(),
            noise_sd: 0.0,
            distractor_error_rate: 0.0,
            stabilization: default_stabilization(),
            readiness_spread: default_spread(),
            entropy_decay: default_entropy_decay(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let bad = |msg: &str| Err(ProviderError::Config(msg.to_string()));
        if !(self.margin_floor >= 0.0) || !self.margin_ceil.is_finite() {
            return bad("margin_floor must be >= 0 and margin_ceil finite");
        }
        if !(self.margin_ceil > self.margin_floor) {
            return bad("margin_ceil must exceed margin_floor");
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return bad("noise_sd must be a nonnegative number");
        }
        if !(0.0..=1.0).contains(&self.distractor_error_rate) {
            return bad("distractor_error_rate must lie in [0, 1]");
        }
        if !(self.stabilization > 0.0 && self.stabilization <= 1.0) {
            return bad("stabilization must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.readiness_spread) {
            return bad("readiness_spread must lie in [0, 1]");
        }
        if !(self.entropy_decay >= 0.0) || !self.entropy_decay.is_finite() {
            return bad("entropy_decay must be a nonnegative number");
        }
        Ok(())
    }

    /// Noiseless margin for a readiness value.
    pub fn margin_at(&self, readiness: f64) -> f64 {
        self.margin_floor + (self.margin_ceil - self.margin_floor) * readiness
    }
}

#[derive(Debug, Clone)]
pub struct OracleProvider {
    config: OracleConfig,
    vocab: Vocabulary,
    truth: Vec<TokenId>,
    offsets: Vec<f64>,
    distractors: Vec<Option<TokenId>>,
    seed: u64,
}

impl OracleProvider {
    pub fn new(
        config: OracleConfig,
        vocab: Vocabulary,
        truth: Vec<TokenId>,
        seed: u64,
    ) -> Result<Self, ProviderError> {
        config.validate()?;
        if let Some(bad) = truth.iter().find(|&&t| !vocab.is_real(t)) {
            return Err(ProviderError::Config(format!(
                "truth token {bad} is not a real token"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x6f72_6163_6c65, 0));
        let mut offsets = Vec::with_capacity(truth.len());
        let mut distractors = Vec::with_capacity(truth.len());
        for &tok in &truth {
            let u: f64 = rng.random();
            offsets.push(u * config.readiness_spread);
            let flip: f64 = rng.random();
            let shift = rng.random_range(1..vocab.size());
            distractors
                .push((flip < config.distractor_error_rate).then(|| (tok + shift) % vocab.size()));
        }
        Ok(Self {
            config,
            vocab,
            truth,
            offsets,
            distractors,
            seed,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn truth(&self) -> &[TokenId] {
        &self.truth
    }

    fn driver(&self, canvas: &Canvas) -> f64 {
        match self.config.growth {
            MarginGrowth::LinearInUnmaskedFraction => canvas.unmasked_fraction(),
            MarginGrowth::StepCountLinear => canvas.step() as f64 / canvas.budget() as f64,
        }
    }

    /// Readiness of position `i` under growth driver `x`.
    pub fn readiness(&self, i: usize, x: f64) -> f64 {
        (x + self.offsets[i]).min(1.0)
    }

    pub fn is_distractor(&self, i: usize) -> bool {
        self.distractors[i].is_some()
    }
}

impl LogitProvider for OracleProvider {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn query(&self, canvas: &Canvas, opts: QueryOptions) -> Result<LogitBundle, ProviderError> {
        if canvas.gen_len() != self.truth.len() {
            return Err(ProviderError::Config(format!(
                "canvas generation length {} differs from oracle truth length {}",
                canvas.gen_len(),
                self.truth.len()
            )));
        }
        let x = self.driver(canvas);
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(mix(self.seed, canvas.step() as u64, 0x006e_6f69_7365));
        let normal = (self.config.noise_sd > 0.0)
            .then(|| Normal::new(0.0, self.config.noise_sd).expect("validated sd"));
        let max_entropy = (self.vocab.size() as f64).ln();

        let positions = (0..self.truth.len())
            .map(|i| {
                let r = self.readiness(i, x);
                let noise = normal.as_ref().map_or(0.0, |n| n.sample(&mut noise_rng));
                let margin = (self.config.margin_at(r) + noise).max(self.config.margin_floor);
                let argmax = match self.distractors[i] {
                    Some(wrong) if r < self.config.stabilization => wrong,
                    _ => self.truth[i],
                };
                PositionLogits {
                    index: i,
                    argmax,
                    top1: margin,
                    top2: 0.0,
                    entropy: opts
                        .want_entropy
                        .then(|| max_entropy * (-self.config.entropy_decay * r).exp()),
                    row: None,
                }
            })
            .collect();
        Ok(LogitBundle::new(positions))
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn name(&self) -> String {
        "oracle".to_string()
    }
}

/// SplitMix64-style mixing of a seed with two stream selectors.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
