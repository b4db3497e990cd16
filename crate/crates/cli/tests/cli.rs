use std::path::Path;
use std::process::{Command, Output};

fn mappohr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mappohr"))
        .args(args)
        .args(["--seed", "4", "--deterministic-timing"])
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mappohr(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    let run = dir.path().join("run");
    let traces = dir.path().join("traces");

    let gen = ok(&["gen", "--out", path(&suite), "--cases", "3", "--conflict-rate", "0.67"]);
    assert!(gen.contains("2 conflicted"), "{gen}");
    assert!(suite.join("suite.csv").exists());

    ok(&["train", "--suite", path(&suite), "--out", path(&run), "--steps", "200", "--quiet"]);
    for file in ["checkpoint.json", "last.json", "curve.csv", "config.toml"] {
        assert!(run.join(file).exists(), "{file} missing");
    }

    let checkpoint = run.join("checkpoint.json");
    let report = ok(&[
        "eval",
        "--suite",
        path(&suite),
        "--checkpoint",
        path(&checkpoint),
        "--traces",
        path(&traces),
    ]);
    assert!(report.starts_with("case,"), "{report}");
    assert_eq!(report.lines().count(), 1 + 3 + 2);

    let first = ok(&["eval", "--suite", path(&suite), "--policy", "replanner"]);
    let second = ok(&["eval", "--suite", path(&suite), "--policy", "replanner"]);
    assert_eq!(first, second);

    let bench = ok(&["bench", "--suite", path(&suite), "--checkpoint", path(&checkpoint)]);
    for name in ["replanner", "rules", "learned"] {
        assert!(bench.contains(name), "{bench}");
    }

    let trace = traces.join("case_00.trace");
    let replay = ok(&["replay", "--trace", path(&trace), "--scenario", path(&suite.join("case_00.scen"))]);
    assert!(replay.contains("t=0"), "{replay}");
}

#[test]
fn unreachable_success_threshold_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite");
    ok(&["gen", "--out", path(&suite), "--cases", "2"]);
    let out = mappohr(&["eval", "--suite", path(&suite), "--policy", "rules", "--min-success", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn learned_policy_needs_a_checkpoint() {
    let out = mappohr(&["eval", "--suite", "nowhere"]);
    assert!(!out.status.success());
}
