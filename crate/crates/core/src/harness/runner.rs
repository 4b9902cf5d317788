//! Benchmark execution and machine-readable outputs.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{
    schedule_of, ProviderHandle, ProviderSpec, RunConfig, Sample, SampleSource, Shape,
};
use super::metrics::{entropy_curves, qps, speedup, EntropyCurve};
use super::HarnessError;
use crate::engine::{decode, CommitMode, DecodeParams, DecodeResult, StopPolicy};
use crate::providers::oracle::mix;
use crate::providers::{oracle_truth_accuracy, LogitProvider, OracleProvider};

/// Label of the paired no-exit run.
pub const BASELINE_LABEL: &str = "baseline";

/// One decode of one sample under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub sample_id: String,
    pub seed: u64,
    /// Truth accuracy; absent when the sample has no truth.
    pub score: Option<f64>,
    pub steps_used: usize,
    pub budget: usize,
    pub speedup: f64,
    pub exit_step: Option<usize>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub variant: String,
    pub sample_id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub stop: StopPolicy,
    pub fingerprint: String,
    pub records: usize,
    pub failures: Vec<Failure>,
    pub mean_score: Option<f64>,
    pub mean_speedup: Option<f64>,
    pub baseline_mean_score: Option<f64>,
    pub gamma: f64,
    pub qps: Option<f64>,
    pub entropy: EntropyCurve,
    /// How speedup is measured: `step_ratio` is `T / steps_used`.
    pub speedup_definition: String,
    /// `macro`: every (sample, seed) record weighs the same.
    pub averaging: String,
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub label: String,
    pub stop: StopPolicy,
    pub fingerprint: String,
    pub records: Vec<RunRecord>,
    pub failures: Vec<Failure>,
    pub results: Vec<DecodeResult>,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub baseline: Summary,
    pub variants: Vec<Summary>,
    /// Baseline records first, then each variant in configuration order.
    pub records: Vec<RunRecord>,
}

impl SweepReport {
    pub fn failure_count(&self) -> usize {
        self.baseline.failures.len()
            + self
                .variants
                .iter()
                .map(|s| s.failures.len())
                .sum::<usize>()
    }

    pub fn variant(&self, label: &str) -> Option<&Summary> {
        self.variants.iter().find(|s| s.variant == label)
    }
}

/// Human-readable name of a stop policy.
pub fn variant_label(stop: &StopPolicy) -> String {
    match stop {
        StopPolicy::Never => BASELINE_LABEL.to_string(),
        StopPolicy::Sched {
            schedule,
            aggregator,
        } => match aggregator {
            crate::confidence::Aggregator::Mean => schedule.label(),
            other => format!("{} {}", schedule.label(), aggregator_tag(other)),
        },
        StopPolicy::HardThreshold {
            tau,
            warmup_fraction,
        } => {
            if *warmup_fraction > 0.0 {
                format!("Hard ({tau}, warmup {warmup_fraction})")
            } else {
                format!("Hard ({tau})")
            }
        }
    }
}

fn aggregator_tag(a: &crate::confidence::Aggregator) -> String {
    match a {
        crate::confidence::Aggregator::Mean => "[mean]".into(),
        crate::confidence::Aggregator::Min => "[min]".into(),
        crate::confidence::Aggregator::Quantile(q) => format!("[q={q}]"),
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    shape: &'a Shape,
    stop: &'a StopPolicy,
    commit_mode: &'a CommitMode,
    provider: &'a ProviderSpec,
    samples: &'a SampleSource,
}

/// SHA-256 over the canonical JSON of everything that affects a decode.
pub fn fingerprint(config: &RunConfig, stop: &StopPolicy) -> Result<String, HarnessError> {
    let shape = config.shape()?;
    let input = FingerprintInput {
        shape: &shape,
        stop,
        commit_mode: &config.commit_mode,
        provider: &config.provider,
        samples: &config.samples,
    };
    let bytes = serde_json::to_vec(&input).map_err(|e| HarnessError::Output(e.to_string()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// A configured benchmark: provider opened, samples and seeds resolved.
pub struct Benchmark {
    config: RunConfig,
    handle: ProviderHandle,
    samples: Vec<Sample>,
    seeds: Vec<u64>,
}

impl Benchmark {
    /// Opens the provider and loads the configured samples.
    pub fn new(config: RunConfig, seeds: Vec<u64>) -> Result<Self, HarnessError> {
        config.validate()?;
        let samples = config.load_samples()?;
        Self::with_samples(config, samples, seeds)
    }

    pub fn with_samples(
        config: RunConfig,
        samples: Vec<Sample>,
        seeds: Vec<u64>,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        if samples.is_empty() {
            return Err(HarnessError::Config("no samples".into()));
        }
        if seeds.is_empty() {
            return Err(HarnessError::Config("no seeds".into()));
        }
        let handle = ProviderHandle::open(&config.provider)?;
        let vocab = handle.vocab();
        for s in &samples {
            let bad = s
                .prompt
                .iter()
                .chain(s.truth.iter().flatten())
                .find(|&&t| !vocab.is_real(t));
            if let Some(t) = bad {
                return Err(HarnessError::Config(format!(
                    "sample {:?}: token {t} is outside the vocabulary",
                    s.id
                )));
            }
            if matches!(handle, ProviderHandle::PerSample { .. }) && s.truth.is_none() {
                return Err(HarnessError::Config(format!(
                    "sample {:?}: the oracle provider needs a truth sequence",
                    s.id
                )));
            }
        }
        Ok(Self {
            config,
            handle,
            samples,
            seeds,
        })
    }

    /// Uses `provider` in place of the configured one.
    pub fn with_provider(
        config: RunConfig,
        provider: Arc<dyn LogitProvider>,
        samples: Vec<Sample>,
        seeds: Vec<u64>,
    ) -> Result<Self, HarnessError> {
        config.validate()?;
        if samples.is_empty() || seeds.is_empty() {
            return Err(HarnessError::Config(
                "samples and seeds must be non-empty".into(),
            ));
        }
        Ok(Self {
            config,
            handle: ProviderHandle::Shared(provider),
            samples,
            seeds,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Decodes one sample; `index` is the sample's position in the input.
    pub fn decode_sample(
        &self,
        index: usize,
        seed: u64,
        params: &DecodeParams,
    ) -> Result<DecodeResult, HarnessError> {
        let sample = &self.samples[index];
        let run_seed = mix(seed, index as u64, 0x7361_6d70);
        match &self.handle {
            ProviderHandle::PerSample { vocab, config } => {
                let truth = sample.truth.clone().unwrap_or_default();
                let provider = OracleProvider::new(config.clone(), *vocab, truth, run_seed)?;
                Ok(decode(&provider, &sample.prompt, params, run_seed)?)
            }
            ProviderHandle::Shared(provider) => {
                Ok(decode(provider.as_ref(), &sample.prompt, params, run_seed)?)
            }
        }
    }

    /// Decodes every (sample, seed) pair under one stop policy.
    pub fn run_variant(&self, stop: StopPolicy) -> Result<VariantRun, HarnessError> {
        let params = self.config.decode_params(stop)?;
        let label = variant_label(&stop);
        let fp = fingerprint(&self.config, &stop)?;
        let tasks: Vec<(usize, u64)> = (0..self.samples.len())
            .flat_map(|i| self.seeds.iter().map(move |&s| (i, s)))
            .collect();
        let run = |&(i, seed): &(usize, u64)| (i, seed, self.decode_sample(i, seed, &params));

        let workers = self.config.workers;
        let outcomes: Vec<_> = if workers > 1 && self.handle.concurrent_safe() {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            pool.install(|| tasks.par_iter().map(run).collect())
        } else {
            tasks.iter().map(run).collect()
        };

        let mut records = Vec::new();
        let mut failures = Vec::new();
        let mut results = Vec::new();
        for (i, seed, outcome) in outcomes {
            let sample = &self.samples[i];
            let scored = outcome.and_then(|res| {
                let score = match &sample.truth {
                    Some(truth) => Some(oracle_truth_accuracy(&res.tokens, truth)?),
                    None => None,
                };
                Ok((res, score))
            });
            match scored {
                Ok((res, score)) => {
                    records.push(RunRecord {
                        variant: label.clone(),
                        sample_id: sample.id.clone(),
                        seed,
                        score,
                        steps_used: res.steps_used,
                        budget: params.budget,
                        speedup: speedup(params.budget, res.steps_used)?,
                        exit_step: res.exit_step,
                        fingerprint: fp.clone(),
                    });
                    results.push(res);
                }
                Err(e) => failures.push(Failure {
                    variant: label.clone(),
                    sample_id: sample.id.clone(),
                    seed,
                    error: e.to_string(),
                }),
            }
        }
        Ok(VariantRun {
            label,
            stop,
            fingerprint: fp,
            records,
            failures,
            results,
        })
    }

    /// Runs `stop` and its paired no-exit baseline.
    pub fn run_benchmark(
        &self,
        stop: StopPolicy,
    ) -> Result<(Vec<RunRecord>, Summary), HarnessError> {
        let baseline = self.run_variant(StopPolicy::Never)?;
        let base_summary = summarize(&baseline, None, self.config.gamma)?;
        let run = self.run_variant(stop)?;
        let summary = summarize(&run, base_summary.mean_score, self.config.gamma)?;
        Ok((run.records, summary))
    }

    /// Baseline once, then every configured stop policy.
    pub fn sweep(&self) -> Result<SweepReport, HarnessError> {
        let stops = self.config.stop_policies()?;
        if stops.is_empty() {
            return Err(HarnessError::Config(
                "sweep needs at least one stop policy or a grid".into(),
            ));
        }
        let gamma = self.config.gamma;
        let base_run = self.run_variant(StopPolicy::Never)?;
        let baseline = summarize(&base_run, None, gamma)?;
        let mut records = base_run.records;
        let mut variants = Vec::with_capacity(stops.len());
        for stop in stops {
            let run = self.run_variant(stop)?;
            variants.push(summarize(&run, baseline.mean_score, gamma)?);
            records.extend(run.records);
        }
        Ok(SweepReport {
            baseline,
            variants,
            records,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregates one variant. QPS uses the summary's own means against the
/// baseline mean score, when both exist.
pub fn summarize(
    run: &VariantRun,
    baseline_mean_score: Option<f64>,
    gamma: f64,
) -> Result<Summary, HarnessError> {
    let mean_score = mean(run.records.iter().filter_map(|r| r.score));
    let mean_speedup = mean(run.records.iter().map(|r| r.speedup));
    let qps_value = match (mean_speedup, mean_score, baseline_mean_score) {
        (Some(s), Some(q), Some(b)) if b > 0.0 => Some(qps(s, q, b, gamma)?),
        _ => None,
    };
    Ok(Summary {
        variant: run.label.clone(),
        stop: run.stop,
        fingerprint: run.fingerprint.clone(),
        records: run.records.len(),
        failures: run.failures.clone(),
        mean_score,
        mean_speedup,
        baseline_mean_score,
        gamma,
        qps: qps_value,
        entropy: entropy_curves(run.results.iter().map(|r| r.trajectory.as_slice())),
        speedup_definition: "step_ratio".to_string(),
        averaging: "macro".to_string(),
    })
}

pub fn write_jsonl<W: Write>(records: &[RunRecord], mut out: W) -> Result<(), HarnessError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| HarnessError::Output(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per variant, baseline first.
pub fn write_summary_csv<W: Write>(
    summaries: &[&Summary],
    gamma: f64,
    out: W,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let qps_col = format!("qps_gamma{gamma}");
    w.write_record([
        "variant",
        "tau_high",
        "tau_low",
        "k",
        "mean_score",
        "mean_speedup",
        qps_col.as_str(),
    ])
    .map_err(|e| HarnessError::Output(e.to_string()))?;
    for s in summaries {
        let sched = schedule_of(&s.stop);
        let (hi, lo) = match (&s.stop, sched) {
            (_, Some(sc)) => (Some(sc.tau_high), Some(sc.tau_low)),
            (StopPolicy::HardThreshold { tau, .. }, None) => (Some(*tau), Some(*tau)),
            _ => (None, None),
        };
        w.write_record([
            s.variant.clone(),
            opt(hi),
            opt(lo),
            opt(sched.and_then(|sc| sc.k)),
            opt(s.mean_score),
            opt(s.mean_speedup),
            opt(s.qps),
        ])
        .map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_entropy_csv<W: Write>(curve: &EntropyCurve, out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "mean", "std"])
        .map_err(|e| HarnessError::Output(e.to_string()))?;
    for p in curve.points() {
        w.write_record([p.step.to_string(), p.mean.to_string(), p.std.to_string()])
            .map_err(|e| HarnessError::Output(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
