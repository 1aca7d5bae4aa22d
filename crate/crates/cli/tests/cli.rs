use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_uranker"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Exit code 1 and a single JSON line on stderr; returns the error kind.
fn err_kind(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    let v: Value = serde_json::from_str(lines[0]).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, groups: &str, k: &str) -> PathBuf {
    let d = dir.join("d");
    let v = ok_json(&["make-synth", "--groups", groups, "--k", k, "--seed", "1", "--out", s(&d), "--size", "32"]);
    assert_eq!(v["groups"].as_u64(), Some(groups.parse().unwrap()));
    d
}

const TINY: [&str; 6] = ["--set", "model=tiny", "--set", "epochs=1", "--set", "holdout_fraction=0"];

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["make-synth", "--groups", "2", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["score", "--ckpt", "x"]).status.code(), Some(2));
    assert_eq!(run(&["make-synth", "--groups", "two", "--k", "3", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    assert_eq!(err_kind(&run(&["eval-ranker", "--ckpt", "x.safetensors", "--data", s(&missing)])), "io");
    assert_eq!(
        err_kind(&run(&["make-synth", "--groups", "1", "--k", "1", "--out", s(&missing)])),
        "invalid_input"
    );
    let d = synth(dir.path(), "2", "3");
    let out = dir.path().join("r.safetensors");
    let bad = run(&["train-ranker", "--data", s(&d), "--out", s(&out), "--set", "no_such_key=1"]);
    assert_eq!(err_kind(&bad), "config");
    assert!(!out.exists());
    let bad = run(&["train-uie", "--data", s(&d), "--out", s(&out), "--lambda", "0.1"]);
    assert_eq!(err_kind(&bad), "config");
    let workers = bin()
        .env("URANKER_NUM_WORKERS", "0")
        .args(["make-synth", "--groups", "1", "--k", "2", "--out", s(&missing)])
        .output()
        .unwrap();
    assert_eq!(err_kind(&workers), "config");
}

#[test]
fn ranker_pipeline_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "3", "4");
    let ckpt = dir.path().join("r.safetensors");
    let mut args = vec!["train-ranker", "--data", s(&d), "--out", s(&ckpt), "--train-groups", "2", "--split-seed", "5"];
    args.extend(TINY);
    let v = ok_json(&args);
    assert_eq!((v["train_groups"].as_u64(), v["test_groups"].as_u64()), (Some(2), Some(1)));
    for suffix in ["json", "run.json", "split.json", "log.jsonl"] {
        assert!(ckpt.with_extension(suffix).is_file(), "{suffix}");
    }
    let log = std::fs::read_to_string(ckpt.with_extension("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let report = dir.path().join("eval.json");
    let v = ok_json(&["eval-ranker", "--ckpt", s(&ckpt), "--data", s(&d), "--report", s(&report), "--split", s(&ckpt.with_extension("split.json"))]);
    assert_eq!(v["groups"].as_u64(), Some(1));
    let full: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["per_group"].as_array().unwrap().len(), 1);
    assert!((-1.0..=1.0).contains(&full["srcc"].as_f64().unwrap()));

    let img = d.join("groups/g0000/images/img00.png");
    let a = ok_json(&["score", "--ckpt", s(&ckpt), "--in", s(&img)]);
    let b = ok_json(&["score", "--ckpt", s(&ckpt), "--in", s(&img)]);
    assert!(a.is_f64());
    assert_eq!(a, b);

    // The snapshot plus seed reproduces the weights bit for bit.
    let again = dir.path().join("again.safetensors");
    let snap = ckpt.with_extension("run.json");
    ok_json(&["train-ranker", "--data", s(&d), "--out", s(&again), "--train-groups", "2", "--split-seed", "5", "--config", s(&snap)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
    let snap_a: Value = serde_json::from_str(&std::fs::read_to_string(&snap).unwrap()).unwrap();
    let snap_b: Value = serde_json::from_str(&std::fs::read_to_string(again.with_extension("run.json")).unwrap()).unwrap();
    assert_eq!(snap_a["config"], snap_b["config"]);
    assert_eq!(snap_a["config"]["model"], "tiny");
}

#[test]
fn uie_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "2", "3");
    let ranker = dir.path().join("r.safetensors");
    let mut args = vec!["train-ranker", "--data", s(&d), "--out", s(&ranker)];
    args.extend(TINY);
    ok_json(&args);
    let before = std::fs::read(&ranker).unwrap();

    let cfg = dir.path().join("uie.cfg");
    std::fs::write(&cfg, "# toy run\nuie_model = toy\nepochs = 1\nbatch_size = 2\ncrop = 32\n").unwrap();
    let net = dir.path().join("n.safetensors");
    let v = ok_json(&["train-uie", "--data", s(&d), "--out", s(&net), "--lambda", "0.025", "--ranker", s(&ranker), "--config", s(&cfg)]);
    assert_eq!(v["pairs"].as_u64(), Some(2));
    assert_eq!(std::fs::read(&ranker).unwrap(), before);
    let snap: Value = serde_json::from_str(&std::fs::read_to_string(net.with_extension("run.json")).unwrap()).unwrap();
    assert_eq!(snap["config"]["lambda"], "0.025");
    let log = std::fs::read_to_string(net.with_extension("log.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(rec["ranker"].is_f64());

    let report = dir.path().join("uie.json");
    let v = ok_json(&["eval-uie", "--ckpt", s(&net), "--data", s(&d), "--report", s(&report)]);
    assert!(v["psnr"].as_f64().unwrap() > 0.0);
    assert!(report.is_file());

    let out = dir.path().join("o/enhanced.png");
    let v = ok_json(&["enhance", "--ckpt", s(&net), "--in", s(&d.join("pairs/input/g0000.png")), "--out", s(&out)]);
    assert_eq!((v["height"].as_u64(), v["width"].as_u64()), (Some(32), Some(32)));
    assert!(out.is_file());
    // A ranker checkpoint is not an enhancement checkpoint.
    assert_eq!(err_kind(&run(&["enhance", "--ckpt", s(&ranker), "--in", s(&out), "--out", s(&out)])), "checkpoint");
}

#[test]
fn score_metrics_command() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("p.json");
    let gt = dir.path().join("g.json");
    std::fs::write(&pred, r#"{"a": [3, 1, 2], "b": [0.9, 0.5, 0.1, 0.0]}"#).unwrap();
    std::fs::write(&gt, r#"{"a": [1, 2, 3], "b": [1, 2, 3, 4]}"#).unwrap();
    let v = ok_json(&["score-metrics", "--pred", s(&pred), "--gt", s(&gt)]);
    // Group a: srcc 0.5, krcc 1/3; group b is perfect.
    assert!((v["srcc"].as_f64().unwrap() - 0.75).abs() < 1e-12);
    assert!((v["krcc"].as_f64().unwrap() - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-12);
    std::fs::write(&gt, r#"{"a": [1, 1, 3]}"#).unwrap();
    assert_eq!(err_kind(&run(&["score-metrics", "--pred", s(&pred), "--gt", s(&gt)])), "json");
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(data: &Path) -> (Server, String) {
    let mut child = bin()
        .args(["annotate-serve", "--data", s(data), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap();
    (Server(child), v["listening"].as_str().unwrap().to_string())
}

#[test]
fn annotation_service_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth(dir.path(), "2", "4");
    let (server, url) = start_server(&d);

    let spec = dir.path().join("voters.json");
    std::fs::write(&spec, r#"{"group": "g0000", "voters": ["v0", "v1", "v2"], "contrarian": ["v2"], "seed": 7}"#).unwrap();
    let v = ok_json(&["annotate-sim", "--voters", s(&spec), "--server", &url]);
    assert_eq!(v["matches_oracle"], true);
    let ranking: Vec<String> = serde_json::from_value(v["ranking"].clone()).unwrap();
    let truth: Vec<String> = serde_json::from_str(&std::fs::read_to_string(d.join("groups/g0000/ranking.json")).unwrap()).unwrap();
    assert_eq!(ranking, truth.iter().map(|f| format!("g0000/{f}")).collect::<Vec<_>>());
    let id = v["session_id"].as_str().unwrap().to_string();

    // Contrarians in the majority invert the result, which the oracle flags.
    std::fs::write(&spec, format!(r#"{{"server": "{url}", "group": "g0001", "voters": ["v0", "v1", "v2"], "contrarian": ["v1", "v2"]}}"#)).unwrap();
    assert_eq!(err_kind(&run(&["annotate-sim", "--voters", s(&spec)])), "oracle_mismatch");

    // A restart replays the event log.
    drop(server);
    let log = d.join("annotation/events.jsonl");
    assert!(log.is_file());
    let (_server, url) = start_server(&d);
    let rt = tokio::runtime::Runtime::new().unwrap();
    let result: Value = rt.block_on(async {
        reqwest::get(format!("{url}/sessions/{id}/result")).await.unwrap().json().await.unwrap()
    });
    assert_eq!(result["ranking"], v["ranking"]);
}
