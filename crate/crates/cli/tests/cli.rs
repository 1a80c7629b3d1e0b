use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn dpfair(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpfair")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dpfair(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_postprocess_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let out = dir.path().join("run");
    ok(&["synth", "--n", "2000", "--seed", "7", "--out", s(&data)]);
    let start = Instant::now();
    let stdout = ok(&["postprocess", "--data", s(&data), "--out-dir", s(&out), "--T", "10000", "--seed", "7"]);
    assert!(start.elapsed().as_secs() < 60);
    assert!(stdout.contains("risk"));
    for f in ["policy.json", "regressor.json", "classifier.json", "history.csv", "report.json", "test.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,oracle_calls,risk,ks_max,clipped_unfairness_norm,grad_map_norm"
    );
    assert_eq!(lines.count(), 101);
    let unlabeled = std::fs::read_to_string(out.join("unlabeled.csv")).unwrap();
    assert_eq!(unlabeled.lines().next().unwrap(), "x1,x2,x3");

    let eval = ok(&["evaluate", "--policy", s(&out.join("policy.json")), "--data", s(&out.join("test.csv"))]);
    assert!(eval.contains("ks[3]"));
}

#[test]
fn identical_arguments_give_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["synth", "--n", "400", "--seed", "3", "--out", s(&data)]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["postprocess", "--data", s(&data), "--out-dir", s(&out), "--T", "2000", "--seed", "5"]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["policy.json", "history.csv", "report.json", "regressor.json", "classifier.json", "test.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let d2 = dir.path().join("d2.csv");
    ok(&["synth", "--n", "400", "--seed", "3", "--out", s(&d2)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&d2).unwrap());
}

#[test]
fn constant_policy_has_zero_ks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["synth", "--n", "200", "--seed", "1", "--out", s(&data)]);
    std::fs::write(dir.path().join("r.json"), r#"{"weights": [0, 0, 0, 0.3], "clamp_bound": 2}"#).unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"classes": 4, "dim": 3, "weights": [0,0,0,0, 0,0,0,0, 0,0,0,0, 0,0,0,0]}"#,
    )
    .unwrap();
    let zeros = vec!["0"; 2 * 5 * 4].join(",");
    let policy = format!(
        r#"{{"grid": {{"bound": 2, "half": 2}}, "beta": 3, "eps": [0.1, 0.1, 0.1, 0.1],
            "p": [0.25, 0.25, 0.25, 0.25], "dual": {{"atoms": 5, "groups": 4, "data": [{zeros}]}},
            "regressor": "r.json", "classifier": "c.json", "group_labels": ["0", "1", "2", "3"]}}"#
    );
    let path = dir.path().join("policy.json");
    std::fs::write(&path, policy).unwrap();
    let report = dir.path().join("report.json");
    ok(&["evaluate", "--policy", s(&path), "--data", s(&data), "--out", s(&report)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    for k in v["fair"]["ks"].as_array().unwrap() {
        assert_eq!(k.as_f64().unwrap(), 0.0);
    }
    assert_eq!(v["fair"]["ks"].as_array().unwrap().len(), 4);
}

#[test]
fn sweep_emits_one_row_per_eps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["synth", "--n", "300", "--seed", "2", "--out", s(&data)]);
    let out = dir.path().join("sweep");
    let stdout = ok(&[
        "sweep", "--data", s(&data), "--eps", "0.5,0.25,0.0625", "--reps", "3", "--T", "1000", "--out-dir", s(&out),
    ]);
    assert!(stdout.contains("±"));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("eps,reps,risk_mean,risk_std,ks_mean,ks_std"));
    assert!(lines[1].starts_with("0.5,3,"));
    assert!(lines[3].starts_with("0.0625,3,"));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"data": "{}", "eps": [0.5], "budget": 500, "out_dir": "{}"}}"#, s(&data), s(&out)),
    )
    .unwrap();
    ok(&["sweep", "--config", s(&cfg), "--reps", "2"]);
    let again = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(again.lines().count(), 2);
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let out = dpfair(&["synth", "--bogus"]);
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,s,y\n1,0,2\nabc,1,3\n").unwrap();
    let out = dpfair(&["postprocess", "--data", s(&bad), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 2") && err.contains("x1"), "{err}");
    let out = dpfair(&["postprocess", "--data", s(&dir.path().join("missing.csv")), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let out = dpfair(&["postprocess", "--data", s(&bad), "--out-dir", s(dir.path()), "--method", "newton"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown optimizer"));
}
