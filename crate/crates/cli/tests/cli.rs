use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn cli(out_root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotransport"))
        .args(args)
        .env("COTRANSPORT_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(bytes)))
}

fn read_json(p: &Path) -> Value {
    json(&std::fs::read(p).unwrap())
}

const TINY: [&str; 14] = [
    "--set", "train.n_envs=2",
    "--set", "train.horizon=8",
    "--set", "train.total_steps=32",
    "--set", "train.epochs=1",
    "--set", "train.minibatch=8",
    "--set", "train.hidden=[16,16]",
    "--set", "train.checkpoint_every=1",
];

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(tmp.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(cli(tmp.path(), &["train", "--set", "train.lrr=1"]).status.code(), Some(2));
    assert_eq!(cli(tmp.path(), &["train", "--set", "no_equals_sign"]).status.code(), Some(2));
    assert_eq!(cli(tmp.path(), &["eval", "--seeds", "many"]).status.code(), Some(2));
    assert!(std::fs::read_dir(tmp.path()).unwrap().next().is_none(), "usage errors write nothing");
}

#[test]
fn domain_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(tmp.path(), &["plan", "--scenario", "S99"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(tmp.path(), &["eval", "--scenario", "S21", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(1), "too few seed groups is a domain error");
}

#[test]
fn print_config_reflects_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.json");
    std::fs::write(&file, r#"{"train": {"lr": 0.001, "epochs": 3}}"#).unwrap();
    let o = cli(
        tmp.path(),
        &["train", "--config", file.to_str().unwrap(), "--set", "train.epochs=4", "--seed", "9", "--print-config"],
    );
    assert!(o.status.success());
    let c = json(&o.stdout);
    assert_eq!(c["command"], "train");
    assert_eq!(c["train"]["lr"], 0.001);
    assert_eq!(c["train"]["epochs"], 4);
    assert_eq!(c["train"]["seed"], 9);
    assert_eq!(c["train"]["gamma"], 0.99);

    std::fs::write(tmp.path().join("bad.json"), r#"{"train": {"epoch": 3}}"#).unwrap();
    let bad = tmp.path().join("bad.json");
    assert_eq!(cli(tmp.path(), &["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn plan_prints_anchor_json() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(tmp.path(), &["plan", "--scenario", "S22"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let seq = json(&o.stdout);
    assert!(!seq["anchors"].as_array().unwrap().is_empty());
    assert_eq!(read_json(&tmp.path().join("plan-S22/anchors.json")), seq);
    assert_eq!(read_json(&tmp.path().join("plan-S22/source.json"))["source"], "internal");
}

#[test]
fn failing_external_planner_falls_back() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(tmp.path(), &["plan", "--scenario", "S21", "--planner", "false"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(read_json(&tmp.path().join("plan-S21/source.json"))["source"], "fallback");
}

#[test]
fn diag_prop1_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cli(tmp.path(), &["diag-prop1"]);
    assert!(o.status.success());
    assert_eq!(json(&o.stdout)["max_joint_drift"], 0.0);
}

fn metrics_without_wallclock(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wallclock");
            v
        })
        .collect()
}

#[test]
fn train_eval_replay_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run1");
    let mut args = vec!["train-single", "--scenario", "S21", "--out", run.to_str().unwrap()];
    args.extend(TINY);
    let o = cli(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "metrics.jsonl", "summary.json", "final/agent0.ckpt", "ckpt/update_000002/state.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join("final/agent1.ckpt").exists(), "scripted partner has no checkpoint");

    // same directory again is refused
    assert_eq!(cli(tmp.path(), &args).status.code(), Some(1));

    // the stored config reproduces the run
    let again = tmp.path().join("run2");
    let cfg = run.join("config.json");
    let o = cli(
        tmp.path(),
        &["train-single", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()],
    );
    assert!(o.status.success());
    assert_eq!(
        metrics_without_wallclock(&run.join("metrics.jsonl")),
        metrics_without_wallclock(&again.join("metrics.jsonl"))
    );

    let ckpt = run.join("final");
    let o = cli(
        tmp.path(),
        &["eval", "--scenario", "S21", "--ckpt", ckpt.to_str().unwrap(), "--seeds", "5", "--episodes", "1"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&tmp.path().join("eval-s1000/report.json"));
    assert!(report.to_string().contains("S21"));

    let o = cli(
        tmp.path(),
        &["replay", "--record", "--scenario", "S21", "--ckpt", ckpt.to_str().unwrap(), "--seed", "3"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let check = json(&o.stdout);
    assert!(check["transition_mismatches"].as_array().unwrap().is_empty());
    assert_eq!(check["anchors_match"], true);
    assert!(tmp.path().join("replay-S21-s3/episode.jsonl").exists());
}

#[test]
fn resume_at_budget_adds_no_updates() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    let mut args = vec!["train", "--scenario", "corridor", "--out", run.to_str().unwrap()];
    args.extend(TINY);
    assert!(cli(tmp.path(), &args).status.success());
    let before = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let o = cli(tmp.path(), &["train", "--resume", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("metrics.jsonl")).unwrap(), before);
}
