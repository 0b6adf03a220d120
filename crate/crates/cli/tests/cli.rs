use std::path::Path;
use std::process::{Command, Output};

fn icppl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icppl"))
        .args(args)
        .output()
        .expect("run icppl")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn generate_writes_one_line_per_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let run = icppl(&["generate", "--model", "rejection_demo", "--n", "10", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 10);
    let summary: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert_eq!(summary["n"], 10);
}

#[test]
fn unknown_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let run = icppl(&["generate", "--model", "no_such_model", "--n", "1", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&run), 2);
    assert!(String::from_utf8_lossy(&run.stderr).contains("no_such_model"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let run = icppl(&["--threads", "0", "inspect", "--traces", "x", "--dot", "y", "--stats", "z"]);
    assert_eq!(code(&run), 2);
}

#[test]
fn malformed_observation_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.json");
    std::fs::write(&obs, "{\"model\": \"gaussian_unknown_mean\"").unwrap();
    let out = dir.path().join("post.json");
    let run = icppl(&[
        "infer", "--model", "gaussian_unknown_mean", "--observation", s(&obs), "--particles", "10", "--seed", "1",
        "--out", s(&out),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn observation_for_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.json");
    std::fs::write(&obs, r#"{"model": "rejection_demo", "y": 0.1}"#).unwrap();
    let out = dir.path().join("post.json");
    let run = icppl(&[
        "infer", "--model", "gaussian_unknown_mean", "--observation", s(&obs), "--particles", "10", "--seed", "1",
        "--out", s(&out),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn unwritable_net_path_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing_dir").join("net.json");
    let run = icppl(&["train", "--model", "gaussian_unknown_mean", "--steps", "100000", "--seed", "1", "--out", s(&out)]);
    assert_eq!(code(&run), 1);
    assert!(run.stdout.is_empty(), "no training telemetry expected");
}

#[test]
fn zero_steps_writes_an_untrained_network_usable_by_infer() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    let run = icppl(&["train", "--model", "gaussian_unknown_mean", "--steps", "0", "--seed", "1", "--out", s(&net)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(run.stdout.is_empty());

    let obs = dir.path().join("obs.json");
    let run = icppl(&["simulate", "--model", "gaussian_unknown_mean", "--seed", "3", "--out", s(&obs)]);
    assert_eq!(code(&run), 0);
    let post = dir.path().join("post.json");
    let run = icppl(&[
        "infer", "--model", "gaussian_unknown_mean", "--observation", s(&obs), "--net", s(&net), "--particles", "200",
        "--seed", "1", "--out", s(&post),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&post).unwrap()).unwrap();
    assert_eq!(report["guided"], true);
    assert_eq!(report["n_particles"], 200);
    assert_eq!(report["proposal_fallbacks"], 0);
}

#[test]
fn training_prints_one_telemetry_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    let run = icppl(&["train", "--model", "rejection_demo", "--steps", "25", "--seed", "2", "--out", s(&net)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(run.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[24]["step"], 24);
    assert!(lines.iter().all(|l| l["loss"].as_f64().unwrap().is_finite()));
}

#[test]
fn mismatched_network_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let net = dir.path().join("net.json");
    assert_eq!(code(&icppl(&["train", "--model", "tau_decay_toy", "--steps", "0", "--seed", "1", "--out", s(&net)])), 0);
    let obs = dir.path().join("obs.json");
    std::fs::write(&obs, r#"{"model": "gaussian_unknown_mean", "y": 0.1}"#).unwrap();
    let run = icppl(&[
        "infer", "--model", "gaussian_unknown_mean", "--observation", s(&obs), "--net", s(&net), "--particles", "10",
        "--seed", "1", "--out", s(&dir.path().join("p.json")),
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn empty_trace_file_gives_empty_stats() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("empty.jsonl");
    std::fs::write(&traces, "").unwrap();
    let (dot, stats) = (dir.path().join("g.dot"), dir.path().join("s.json"));
    let run = icppl(&["inspect", "--traces", s(&traces), "--dot", s(&dot), "--stats", s(&stats)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(stats["n_traces"], 0);
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}

#[test]
fn malformed_trace_line_fails_with_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    assert_eq!(code(&icppl(&["generate", "--model", "gaussian_unknown_mean", "--n", "2", "--seed", "1", "--out", s(&traces)])), 0);
    let mut text = std::fs::read_to_string(&traces).unwrap();
    text.push_str("not json\n");
    std::fs::write(&traces, text).unwrap();
    let run = icppl(&[
        "inspect", "--traces", s(&traces), "--dot", s(&dir.path().join("g.dot")), "--stats",
        s(&dir.path().join("s.json")),
    ]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains('3'));
}

#[test]
fn threshold_must_exceed_one() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("empty.jsonl");
    std::fs::write(&traces, "").unwrap();
    let run = icppl(&[
        "inspect", "--traces", s(&traces), "--dot", s(&dir.path().join("g.dot")), "--stats",
        s(&dir.path().join("s.json")), "--threshold", "1.0",
    ]);
    assert_eq!(code(&run), 2);
}

#[test]
fn simulate_then_infer_round_trips_tau_observations() {
    let dir = tempfile::tempdir().unwrap();
    let obs = dir.path().join("obs.json");
    let run = icppl(&["simulate", "--model", "tau_decay_toy", "--seed", "9", "--out", s(&obs)]);
    assert_eq!(code(&run), 0);
    let truth: serde_json::Value = serde_json::from_slice(&run.stdout).unwrap();
    assert!(truth["channel"].is_i64() || truth["channel"].is_u64());
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&obs).unwrap()).unwrap();
    assert_eq!(parsed["model"], "tau_decay_toy");
    assert_eq!(parsed["grid"], serde_json::json!([4, 7, 7]));
    assert_eq!(parsed["cells"].as_array().unwrap().len(), 196);
}
