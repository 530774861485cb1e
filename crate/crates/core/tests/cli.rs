use std::path::Path;
use std::process::{Command, Output};

use adazoom::config::default_keys;
use adazoom::metrics::EvalReport;
use adazoom::pipeline::{QcReport, SftRecord};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adazoom"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("ADAZOOM_ANNOTATOR_URL")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn help_lists_every_config_key_with_default() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for (k, v) in default_keys() {
        assert!(text.contains(&format!("{k} = {v}")), "missing {k}");
    }
    assert!(text.contains("ADAZOOM_ANNOTATOR_URL"));
    let sub = run(dir.path(), &["train", "--help"]);
    assert_eq!(code(&sub), 0);
    assert!(String::from_utf8(sub.stdout).unwrap().contains("train.group_size = 8"));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    assert_eq!(code(&run(d, &["gen-scenes"])), 1);
    assert_eq!(code(&run(d, &["--set", "train.nope=1", "gen-scenes", "--out", "s.jsonl"])), 1);
    assert_eq!(code(&run(d, &["--set", "train.epsilon=-1", "gen-scenes", "--out", "s.jsonl"])), 1);
    assert_eq!(code(&run(d, &["--parallel", "0", "gen-scenes", "--out", "s.jsonl"])), 1);
    std::fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 1\n").unwrap();
    assert_eq!(code(&run(d, &["--config", "bad.toml", "gen-scenes", "--out", "s.jsonl"])), 1);
    assert_eq!(code(&run(d, &["--config", "missing.toml", "gen-scenes", "--out", "s.jsonl"])), 1);
    let out = run(d, &["gen-data", "--scenes", "s.jsonl", "--out", "d.jsonl", "--annotator", "external"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8(out.stderr).unwrap().contains("ADAZOOM_ANNOTATOR_URL"));
}

#[test]
fn runtime_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["eval", "--scenes", "missing.jsonl", "--policy", "uniform"])), 2);
    std::fs::write(d.join("garbage.jsonl"), "not json\n").unwrap();
    assert_eq!(code(&run(d, &["train", "--scenes", "garbage.jsonl", "--out", "c.json"])), 2);
    assert_eq!(code(&run(d, &["gen-scenes", "--out", "s.jsonl", "--count", "5"])), 0);
    std::fs::write(d.join("ck.json"), "{\"version\": 1}").unwrap();
    assert_eq!(code(&run(d, &["eval", "--scenes", "s.jsonl", "--policy", "ck.json"])), 2);
}

#[test]
fn full_workflow_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), "seed = 3\n[train]\nupdates = 5\ngroups_per_update = 4\n[clone]\nepochs = 50\n").unwrap();
    let cfg = ["--config", "run.toml", "--parallel", "2"];
    let step = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(cfg);
        let out = run(d, &all);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    step(&["gen-scenes", "--out", "scenes.jsonl", "--count", "60"]);
    step(&["gen-data", "--scenes", "scenes.jsonl", "--out", "data.jsonl", "--report", "qc.json"]);
    step(&["clone", "--scenes", "scenes.jsonl", "--data", "data.jsonl", "--out", "cloned.json", "--curve", "curve.json"]);
    step(&["train", "--scenes", "scenes.jsonl", "--init", "cloned.json", "--out", "trained.json", "--log", "log.jsonl"]);
    step(&["eval", "--scenes", "scenes.jsonl", "--policy", "trained.json", "--out", "eval.json", "--csv", "eval.csv", "--transcripts", "t.jsonl"]);
    step(&["eval", "--scenes", "scenes.jsonl", "--policy", "always-zoom", "--out", "zoom.json"]);
    let table = step(&["report", "eval.json", "zoom.json"]);

    let qc: QcReport = serde_json::from_str(&std::fs::read_to_string(d.join("qc.json")).unwrap()).unwrap();
    assert_eq!(qc.questions, 60);
    let records: Vec<SftRecord> = std::fs::read_to_string(d.join("data.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), qc.retained);
    assert_eq!(std::fs::read_to_string(d.join("data.actions.jsonl")).unwrap().lines().count(), records.len());

    let curve: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(d.join("curve.json")).unwrap()).unwrap();
    assert_eq!(curve.len(), 51);
    assert!(curve.windows(2).all(|w| w[1] >= w[0] - 1e-12));

    let log = std::fs::read_to_string(d.join("log.jsonl")).unwrap();
    let kinds: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["kind"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(kinds.iter().filter(|k| *k == "update").count(), 5);
    assert_eq!(kinds.iter().filter(|k| *k == "trajectory").count(), 5 * 4 * 8);

    let rep: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(rep.episodes, 60);
    assert_eq!(std::fs::read_to_string(d.join("t.jsonl")).unwrap().lines().count(), 60);
    let table = String::from_utf8(table.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("policy,")).count(), 1);
    assert!(table.contains("always-zoom,all,60,"));
}
