use std::path::Path;
use std::process::{Command, Output};

fn uinav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uinav"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uinav(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sim_list_shows_every_builtin_task() {
    let out = ok(&["sim", "list"]);
    for id in ["search_tube", "compose_mail", "view_cart"] {
        assert!(out.contains(id), "{out}");
    }
    assert!(out.lines().any(|l| l.starts_with("dark_mode_mail") && l.contains("false")));
}

#[test]
fn recorded_demos_replay_and_a_tampered_one_does_not() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["demo", "record", "--task", "search_mail", "--count", "2", "--out", p(dir.path())]);
    assert!(ok(&["demo", "replay", p(dir.path())]).contains("2 of 2"));

    let trace = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    let text = std::fs::read_to_string(&trace).unwrap();
    let bad = dir.path().join("bad.uinav.jsonl");
    std::fs::write(&bad, text.replace("\"seed\":", "\"seed\":7")).unwrap();
    assert!(!uinav(&["demo", "replay", p(&bad)]).status.success());
}

#[test]
fn train_then_eval_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let demos = dir.path().join("demos");
    let ckpt = dir.path().join("agent.ckpt");
    let json = dir.path().join("eval.json");
    ok(&["demo", "record", "--task", "toggle_setting", "--count", "1", "--out", p(&demos)]);
    ok(&["train", "agent", "--demos", p(&demos), "--out", p(&ckpt), "--budget", "64"]);
    assert!(ckpt.exists());
    ok(&["eval", "--agent", p(&ckpt), "--per-task", "1", "--json", p(&json)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let acc = report["task_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}
