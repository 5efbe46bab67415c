use std::path::Path;
use std::process::{Command, Output};

fn aura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aura"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: &str) {
    let o = aura(&["gen-synth", "--n", n, "--rate", "0.5", "--seed", "3", "--out", p(dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_synth_writes_all_splits_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "40");
    for (name, n) in [("train", 40), ("validation", 10), ("test", 10), ("prior", 40)] {
        let text = std::fs::read_to_string(dir.path().join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n, "{name}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "gen-synth");
    assert!(manifest["timestamp"].is_string());
    let o = aura(&[
        "validate",
        "--input",
        &format!("{},{}", p(&dir.path().join("train.jsonl")), p(&dir.path().join("test.jsonl"))),
        "--out",
        p(&dir.path().join("v")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = aura(&["run", "--test", "x.jsonl", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--train"), "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = aura(&["run", "--train", "nope.jsonl", "--test", "nope.jsonl", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--train"), "{}", stderr(&o));
}

#[test]
fn invalid_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"id": "q1", "question": "q", "choices": ["a", "b"], "rationales": ["r", "s"], "gold_index": 5}"#,
    )
    .unwrap();
    let o = aura(&["validate", "--input", p(&bad), "--out", p(&dir.path().join("v"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.jsonl"));
}

#[test]
fn unreachable_backend_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "8");
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let o = aura(&[
        "score",
        "--input",
        p(&dir.path().join("test.jsonl")),
        "--backend",
        &format!("http://127.0.0.1:{port}"),
        "--timeout-ms",
        "300",
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn score_can_stream_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "20");
    let out = dir.path().join("s");
    let o = aura(&["score", "--input", p(&dir.path().join("test.jsonl")), "--out", p(&out), "--emit", "-"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 5);
    assert_eq!(stdout, std::fs::read_to_string(out.join("beliefs.jsonl")).unwrap());
    for line in stdout.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["role"], "prior");
    }
}

fn run_aura(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let out = dir.join(out);
    let mut args = vec![
        "run",
        "--train",
        p(&dir.join("train.jsonl")).to_owned().leak(),
        "--test",
        p(&dir.join("test.jsonl")).to_owned().leak(),
        "--prior-corpus",
        p(&dir.join("prior.jsonl")).to_owned().leak(),
        "--out",
        p(&out).to_owned().leak(),
    ];
    args.extend_from_slice(extra);
    aura(&args)
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "80");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 2, "mode": "standard", "seed": 4}"#).unwrap();
    let o = run_aura(dir.path(), "r", &["--config", p(&cfg), "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/config.json")).unwrap()).unwrap();
    assert_eq!(stored["mode"], "standard");
    assert_eq!(stored["seed"], 4);
    assert_eq!(stored["train_config_stage1"]["epochs"], 3);
}

#[test]
fn evaluate_reproduces_the_stored_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "120");
    assert!(run_aura(dir.path(), "a", &[]).status.success());
    assert!(run_aura(dir.path(), "b", &["--mode", "standard"]).status.success());
    let o = aura(&[
        "evaluate",
        "--run",
        p(&dir.path().join("a")),
        "--baseline",
        p(&dir.path().join("b")),
        "--out",
        p(&dir.path().join("e")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |f: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(f)).unwrap()).unwrap()
    };
    let eval = read("e/evaluation.json");
    let report = read("a/report.json");
    assert_eq!(eval["accuracy"], report["report"]["accuracy"]);
    assert!(eval["accuracy"].is_number());
    assert_eq!(eval["comparisons"].as_array().unwrap().len(), 1);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "100");
    assert!(run_aura(dir.path(), "a", &[]).status.success());
    assert!(run_aura(dir.path(), "b", &[]).status.success());
    let mut names: Vec<_> = std::fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n != "manifest.json")
        .collect();
    names.sort();
    assert!(names.len() >= 5);
    for n in names {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(&n)).unwrap(),
            std::fs::read(dir.path().join("b").join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn help_exits_zero() {
    assert_eq!(aura(&["--help"]).status.code(), Some(0));
    assert_eq!(aura(&["bogus"]).status.code(), Some(1));
}
