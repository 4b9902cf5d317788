use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sched_core::diffusion::Canvas;
use sched_core::engine::StopPolicy;
use sched_core::harness::config::{ProviderHandle, ProviderSpec, RunConfig, SEED_ENV};
use sched_core::harness::golden::{
    check_qps_rows, read_qps_rows, DEFAULT_TOLERANCE, DREAM_QPS_REFERENCE,
};
use sched_core::harness::metrics::{EntropyCurve, DEFAULT_GAMMA};
use sched_core::harness::runner::{
    summarize, variant_label, write_entropy_csv, write_jsonl, write_summary_csv,
};
use sched_core::harness::{Benchmark, HarnessError, Summary};
use sched_core::providers::wire::serve;
use sched_core::providers::{LogitProvider, QueryOptions, WireClient};

const EXIT_CONFIG: u8 = 1;
const EXIT_PROVIDER: u8 = 2;
const EXIT_MISMATCH: u8 = 3;

#[derive(Parser)]
#[command(
    name = "sched",
    version,
    about = "Masked-diffusion decoding with scheduled early exit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode one sample and print the result as JSON.
    Decode {
        #[arg(short, long)]
        config: PathBuf,
        /// Sample id; defaults to the first sample.
        #[arg(long)]
        sample: Option<String>,
        /// Stop policy as JSON; defaults to the first configured one.
        #[arg(long)]
        stop: Option<String>,
        #[arg(long, env = SEED_ENV)]
        seed: Option<u64>,
    },
    /// Run the baseline and every configured stop policy.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        /// Writes records.jsonl, summary.csv and summary.json here; without
        /// it the records go to stdout.
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
        /// Overrides the configured worker count.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Recompute QPS from a CSV of scores and speedups.
    Qps {
        /// CSV with variant, score, speedup, baseline_score and an optional
        /// expected_qps column; defaults to the bundled Dream table.
        #[arg(short, long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Emit the per-step entropy curve of one stop policy as CSV.
    Entropy {
        #[arg(short, long)]
        config: PathBuf,
        /// Stop policy as JSON; defaults to no early exit.
        #[arg(long)]
        stop: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Handshake with an external provider and validate one response.
    ServeCheck {
        /// Connect to a TCP address.
        #[arg(long, conflicts_with = "command")]
        address: Option<String>,
        /// Launch a server and talk to it over stdio.
        #[arg(last = true)]
        command: Vec<String>,
    },
    /// Serve an in-process provider over stdio or TCP.
    Serve {
        /// JSON provider spec (n-gram kind).
        #[arg(short, long)]
        provider: PathBuf,
        #[arg(long)]
        listen: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        let code = match err {
            HarnessError::Provider(_) => EXIT_PROVIDER,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            message: err.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(err: io::Error) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: err.to_string(),
        }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decode {
            config,
            sample,
            stop,
            seed,
        } => cmd_decode(&config, sample.as_deref(), stop.as_deref(), seed),
        Command::Sweep {
            config,
            out_dir,
            workers,
        } => cmd_sweep(&config, out_dir.as_deref(), workers),
        Command::Qps {
            input,
            gamma,
            tolerance,
        } => cmd_qps(input.as_deref(), gamma, tolerance),
        Command::Entropy { config, stop, out } => {
            cmd_entropy(&config, stop.as_deref(), out.as_deref())
        }
        Command::ServeCheck { address, command } => cmd_serve_check(address.as_deref(), &command),
        Command::Serve { provider, listen } => cmd_serve(&provider, listen.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn parse_stop(text: &str) -> Result<StopPolicy, Failure> {
    let stop: StopPolicy =
        serde_json::from_str(text).map_err(|e| config_error(format!("--stop: {e}")))?;
    stop.validate().map_err(|e| config_error(e.to_string()))?;
    Ok(stop)
}

fn cmd_decode(
    path: &Path,
    sample: Option<&str>,
    stop: Option<&str>,
    seed: Option<u64>,
) -> Result<u8, Failure> {
    let config = RunConfig::from_path(path)?;
    let stop = match stop {
        Some(s) => parse_stop(s)?,
        None => config
            .stop_policies()?
            .first()
            .copied()
            .unwrap_or(StopPolicy::Never),
    };
    let seed = match seed {
        Some(s) => s,
        None => config.resolve_seeds(None)?[0],
    };
    let params = config.decode_params(stop)?;
    let bench = Benchmark::new(config, vec![seed])?;
    let index = match sample {
        Some(id) => bench
            .samples()
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| config_error(format!("no sample with id {id:?}")))?,
        None => 0,
    };
    let result = bench.decode_sample(index, seed, &params)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, &result).map_err(|e| config_error(e.to_string()))?;
    writeln!(out)?;
    Ok(0)
}

fn cmd_sweep(path: &Path, out_dir: Option<&Path>, workers: Option<usize>) -> Result<u8, Failure> {
    let mut config = RunConfig::from_path(path)?;
    if let Some(w) = workers {
        config.workers = w;
    }
    let seeds = config.seeds_from_env()?;
    let gamma = config.gamma;
    let report = Benchmark::new(config, seeds)?.sweep()?;
    let mut rows: Vec<&Summary> = vec![&report.baseline];
    rows.extend(report.variants.iter());

    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_jsonl(
                &report.records,
                BufWriter::new(File::create(dir.join("records.jsonl"))?),
            )?;
            write_summary_csv(&rows, gamma, File::create(dir.join("summary.csv"))?)?;
            let mut f = BufWriter::new(File::create(dir.join("summary.json"))?);
            serde_json::to_writer_pretty(&mut f, &rows).map_err(|e| config_error(e.to_string()))?;
            writeln!(f)?;
            write_summary_csv(&rows, gamma, io::stderr())?;
        }
        None => write_jsonl(&report.records, io::stdout().lock())?,
    }
    let failures = report.failure_count();
    if failures > 0 {
        eprintln!("error: {failures} decode(s) failed; see summary failures");
        return Ok(EXIT_PROVIDER);
    }
    Ok(0)
}

fn cmd_qps(input: Option<&Path>, gamma: f64, tolerance: f64) -> Result<u8, Failure> {
    let rows = match input {
        Some(p) => read_qps_rows(File::open(p)?)?,
        None => read_qps_rows(DREAM_QPS_REFERENCE.as_bytes())?,
    };
    let checks = check_qps_rows(&rows, gamma, tolerance)?;
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["model", "variant", "qps", "expected_qps", "match"])
        .map_err(|e| config_error(e.to_string()))?;
    let mut mismatches = 0;
    for c in &checks {
        if c.within_tolerance == Some(false) {
            mismatches += 1;
        }
        w.write_record([
            c.model.clone(),
            c.variant.clone(),
            format!("{:.4}", c.qps),
            c.expected_qps.map(|e| e.to_string()).unwrap_or_default(),
            c.within_tolerance
                .map(|b| b.to_string())
                .unwrap_or_default(),
        ])
        .map_err(|e| config_error(e.to_string()))?;
    }
    w.flush()?;
    if mismatches > 0 {
        eprintln!("error: {mismatches} row(s) differ by more than {tolerance}");
        return Ok(EXIT_MISMATCH);
    }
    Ok(0)
}

fn cmd_entropy(path: &Path, stop: Option<&str>, out: Option<&Path>) -> Result<u8, Failure> {
    let mut config = RunConfig::from_path(path)?;
    config.record_entropy = true;
    let stop = match stop {
        Some(s) => parse_stop(s)?,
        None => StopPolicy::Never,
    };
    let seeds = config.seeds_from_env()?;
    let gamma = config.gamma;
    let bench = Benchmark::new(config, seeds)?;
    let run = bench.run_variant(stop)?;
    let summary = summarize(&run, None, gamma)?;
    if summary.entropy == EntropyCurve::NoData {
        return Err(Failure {
            code: if run.failures.is_empty() {
                EXIT_CONFIG
            } else {
                EXIT_PROVIDER
            },
            message: format!("no entropy data for {}", variant_label(&stop)),
        });
    }
    match out {
        Some(p) => write_entropy_csv(&summary.entropy, File::create(p)?)?,
        None => write_entropy_csv(&summary.entropy, io::stdout().lock())?,
    }
    if !run.failures.is_empty() {
        eprintln!("error: {} decode(s) failed", run.failures.len());
        return Ok(EXIT_PROVIDER);
    }
    Ok(0)
}

fn provider_failure(err: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_PROVIDER,
        message: err.to_string(),
    }
}

fn cmd_serve_check(address: Option<&str>, command: &[String]) -> Result<u8, Failure> {
    let client = match (address, command.split_first()) {
        (Some(addr), None) => WireClient::connect(addr).map_err(provider_failure)?,
        (None, Some((program, args))) => {
            WireClient::spawn(program, args).map_err(provider_failure)?
        }
        _ => {
            return Err(config_error(
                "give either --address or a server command after --",
            ))
        }
    };
    let vocab = client.vocab();
    let probe = Canvas::new(vocab, Vec::new(), 4, 4).map_err(|e| config_error(e.to_string()))?;
    let opts = QueryOptions {
        want_full: false,
        want_entropy: true,
    };
    let bundle = client.query(&probe, opts).map_err(provider_failure)?;
    let report = serde_json::json!({
        "status": "ok",
        "handshake": client.handshake(),
        "probe_positions": bundle.positions.len(),
    });
    println!("{report}");
    Ok(0)
}

fn cmd_serve(spec_path: &Path, listen: Option<&str>) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(spec_path)?;
    let spec: ProviderSpec =
        serde_json::from_str(&text).map_err(|e| config_error(format!("provider spec: {e}")))?;
    if !matches!(spec, ProviderSpec::Ngram { .. }) {
        return Err(config_error("only n-gram providers can be served"));
    }
    let provider = match ProviderHandle::open(&spec)? {
        ProviderHandle::Shared(p) => p,
        ProviderHandle::PerSample { .. } => unreachable!("n-gram providers are shared"),
    };
    let name = provider.name();
    match listen {
        None => {
            let stdin = io::stdin();
            serve(provider.as_ref(), &name, stdin.lock(), io::stdout().lock())
                .map_err(provider_failure)?;
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = BufReader::new(stream.try_clone()?);
                if let Err(e) = serve(provider.as_ref(), &name, reader, stream) {
                    eprintln!("session ended: {e}");
                }
            }
        }
    }
    Ok(0)
}
