use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_sched");

fn sched(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SCHED_SEED")
        .output()
        .expect("run sched")
}

const ORACLE_CONFIG: &str = r#"{
    "preset": "hotpotqa",
    "stops": [{"kind": "sched", "schedule": {"family": "linear", "tau_high": 7.5, "tau_low": 0.0}}],
    "grid": {"tau_high": 7.5},
    "provider": {"kind": "oracle", "vocab_size": 50,
                 "oracle": {"margin_floor": 0.0, "margin_ceil": 8.0, "noise_sd": 0.2,
                            "distractor_error_rate": 0.3, "stabilization": 0.6}},
    "samples": {"source": "synthetic", "count": 6}
}"#;

const NGRAM_SPEC: &str = r#"{
    "kind": "ngram",
    "vocab_size": 6,
    "corpus": [[0, 1, 2, 3, 4, 5, 0, 1, 2, 3], [5, 4, 3, 2, 1, 0]]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn qps_golden_table_passes() {
    let out = sched(&["qps"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 19);
    assert!(text.contains("dream-base,\"Exp-k=16 (7.5,0)\",2.0271,2.03,true"));
}

#[test]
fn qps_mismatch_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "q.csv",
        "variant,score,speedup,baseline_score,expected_qps\nok,50,2,50,2\nbad,50,2,50,3\n",
    );
    let out = sched(&["qps", "--input", &path]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", r#"{"preset": "nope"}"#);
    assert_eq!(sched(&["sweep", "--config", &path]).status.code(), Some(1));
    let path = write(
        dir.path(),
        "d.json",
        &ORACLE_CONFIG.replace("hotpotqa", "unknown"),
    );
    assert_eq!(sched(&["decode", "--config", &path]).status.code(), Some(1));
    assert_eq!(
        sched(&["qps", "--input", "/nonexistent.csv"]).status.code(),
        Some(1)
    );
}

#[test]
fn decode_prints_result_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", ORACLE_CONFIG);
    let out = sched(&[
        "decode", "--config", &path, "--sample", "s0002", "--seed", "4",
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 32);
    assert_eq!(
        v["trajectory"].as_array().unwrap().len() as u64,
        v["steps_used"].as_u64().unwrap()
    );

    let never = sched(&["decode", "--config", &path, "--stop", r#"{"kind":"never"}"#]);
    let v: serde_json::Value = serde_json::from_slice(&never.stdout).unwrap();
    assert_eq!(v["steps_used"], 32);
    assert!(v["exit_step"].is_null());

    assert_eq!(
        sched(&["decode", "--config", &path, "--sample", "zzz"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn seed_env_changes_default_seed() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", ORACLE_CONFIG);
    let run = |seed: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.args(["sweep", "--config", &path])
            .env_remove("SCHED_SEED");
        if let Some(s) = seed {
            cmd.env("SCHED_SEED", s);
        }
        cmd.output().unwrap()
    };
    let a = run(None);
    let b = run(Some("0"));
    let c = run(Some("11"));
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
    let first: serde_json::Value =
        serde_json::from_str(String::from_utf8(c.stdout).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["seed"], 11);
    assert_eq!(run(Some("abc")).status.code(), Some(1));
}

#[test]
fn sweep_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(
        dir.path(),
        "c.toml",
        r#"
        preset = "mmlu"
        seeds = [0, 1]

        [grid]
        tau_high = 7.5

        [provider]
        kind = "oracle"
        vocab_size = 50
        oracle = { margin_floor = 0.0, margin_ceil = 8.0, distractor_error_rate = 0.2, stabilization = 0.6 }

        [samples]
        source = "synthetic"
        count = 5
    "#,
    );
    let out_dir = dir.path().join("out");
    let out = sched(&[
        "sweep",
        "--config",
        &path,
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let records = std::fs::read_to_string(out_dir.join("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 9 * 10);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("variant,tau_high,tau_low,k,mean_score,mean_speedup,qps_gamma4\n"));
    assert_eq!(summary.lines().count(), 10);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(json[0]["speedup_definition"], "step_ratio");
    assert_eq!(json[0]["averaging"], "macro");
}

#[test]
fn entropy_emits_curve() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), "c.json", ORACLE_CONFIG);
    let out = sched(&["entropy", "--config", &path]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("step,mean,std\n"));
    assert_eq!(text.lines().count(), 33);
}

#[test]
fn serve_check_against_stdio_server() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "ngram.json", NGRAM_SPEC);
    let out = sched(&["serve-check", "--", BIN, "serve", "--provider", &spec]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["handshake"]["vocab_size"], 6);
    assert_eq!(v["probe_positions"], 4);
}

#[test]
fn serve_check_against_tcp_server() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "ngram.json", NGRAM_SPEC);
    let mut server = Command::new(BIN)
        .args(["serve", "--provider", &spec, "--listen", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();
    let out = sched(&["serve-check", "--address", &addr]);
    server.kill().ok();
    server.wait().ok();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn serve_check_transport_failure_exits_two() {
    assert_eq!(
        sched(&["serve-check", "--", "/nonexistent/server"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(sched(&["serve-check", "--", "true"]).status.code(), Some(2));
    assert_eq!(sched(&["serve-check"]).status.code(), Some(1));
}
