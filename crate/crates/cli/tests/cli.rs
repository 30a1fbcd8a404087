use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn recycled(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recycled"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = recycled(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code plus the parsed single-line error report.
fn failure(args: &[&str]) -> (i32, Value) {
    let out = recycled(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 1, "expected one JSON error line, got {stderr:?}");
    (out.status.code().unwrap(), serde_json::from_str(lines[0]).unwrap())
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn synth_split_corpus(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&[
        "--seed",
        "3",
        "synth",
        "--kind",
        "split",
        "--count",
        "400",
        "--properties",
        "20",
        "--out-dir",
        path(&data),
    ]);
    data.join("records.jsonl")
}

#[test]
fn split_then_audit_is_clean_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_split_corpus(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "--seed",
            "5",
            "split",
            "--records",
            path(&records),
            "--scale",
            "0.01",
            "--out-dir",
            path(out),
        ]);
    }
    for f in [
        "train.jsonl",
        "validation.jsonl",
        "test.jsonl",
        "partition.json",
        "blocks.json",
        "audit.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let audit_dir = dir.path().join("audit");
    let stdout = ok(&["audit-split", "--split-dir", path(&a), "--out-dir", path(&audit_dir)]);
    let audit: Value = serde_json::from_str(stdout.trim()).unwrap();
    for key in [
        "overlap_train_test",
        "overlap_train_validation",
        "overlap_test_validation",
    ] {
        assert_eq!(audit[key], 0, "{key}");
    }
    assert_eq!(audit["validation_articles"], 50);
    assert_eq!(audit["test_articles"], 50);
}

#[test]
fn tampered_split_fails_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let records = synth_split_corpus(dir.path());
    let split = dir.path().join("split");
    ok(&[
        "split",
        "--records",
        path(&records),
        "--scale",
        "0.01",
        "--out-dir",
        path(&split),
    ]);
    let test = fs::read_to_string(split.join("test.jsonl")).unwrap();
    let mut validation = fs::read_to_string(split.join("validation.jsonl")).unwrap();
    validation.push_str(test.lines().next().unwrap());
    validation.push('\n');
    fs::write(split.join("validation.jsonl"), validation).unwrap();
    let (code, err) = failure(&[
        "audit-split",
        "--split-dir",
        path(&split),
        "--out-dir",
        path(&dir.path().join("audit")),
    ]);
    assert_eq!(code, 4);
    assert_eq!(err["error"], "audit");
    assert!(err["message"].as_str().unwrap().contains("overlap_test_validation"));
}

#[test]
fn evaluating_gold_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    ok(&["synth", "--kind", "extraction", "--count", "20", "--out-dir", path(&fx)]);
    let gold = fx.join("records.jsonl");
    let tags = dir.path().join("tags");
    ok(&["tag-em-in", "--records", path(&gold), "--out-dir", path(&tags)]);
    let ev = dir.path().join("ev");
    ok(&[
        "evaluate",
        "--predictions",
        path(&gold),
        "--gold",
        path(&gold),
        "--tags",
        path(&tags.join("tags.jsonl")),
        "--out-dir",
        path(&ev),
    ]);
    let m = read_json(&ev.join("metrics.json"));
    assert_eq!(m["mean_f1"], 1.0);
    assert_eq!(m["mean_multilabel_f1"], 1.0);
    assert_eq!(m["em_recall"], 1.0);
    assert_eq!(m["in_recall"], 1.0);
    assert!(m["per_label"].as_object().unwrap().values().all(|v| v == 1.0));
}

#[test]
fn every_run_records_its_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&[
        "--seed",
        "9",
        "synth",
        "--kind",
        "leakage",
        "--count",
        "5",
        "--out-dir",
        path(&out),
    ]);
    let cfg = read_json(&out.join("resolved_config.json"));
    assert_eq!(cfg["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["command"]["name"], "synth");
}

#[test]
fn build_recycled_merges_instances() {
    let dir = tempfile::tempdir().unwrap();
    let inst = dir.path().join("inst.jsonl");
    fs::write(
        &inst,
        concat!(
            r#"{"key":"Q1","doc":"Anna was born in Lyon.","prop":"place of birth","answer":"Lyon"}"#,
            "\n",
            r#"{"key":"Q1","doc":"Anna was born in Lyon.","prop":"occupation","answer":["painter","poet"]}"#,
            "\n",
            r#"{"key":"Q2","doc":"Boris.","prop":"occupation","answer":"chemist"}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let stdout = ok(&[
        "build-recycled",
        "--instances",
        path(&inst),
        "--id-field",
        "key",
        "--text-field",
        "doc",
        "--property-field",
        "prop",
        "--values-field",
        "answer",
        "--out-dir",
        path(&out),
    ]);
    let report: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(report["instances"], 3);
    assert_eq!(report["articles"], 2);
    let first: Value = serde_json::from_str(
        fs::read_to_string(out.join("records.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(
        first["properties"]["occupation"],
        serde_json::json!(["painter", "poet"])
    );
}

#[test]
fn errors_are_single_json_lines_with_typed_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, err) = failure(&["split", "--records", "missing.jsonl", "--out-dir", path(&out)]);
    assert_eq!((code, err["error"].as_str().unwrap()), (3, "data"));
    assert!(err["message"].as_str().unwrap().contains("missing.jsonl"));

    let (code, _) = failure(&["no-such-command"]);
    assert_eq!(code, 2);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": 1}\n").unwrap();
    let (code, _) = failure(&["tag-em-in", "--records", path(&bad), "--out-dir", path(&out)]);
    assert_eq!(code, 3);

    let fx = dir.path().join("fx");
    ok(&["synth", "--kind", "extraction", "--count", "5", "--out-dir", path(&fx)]);
    let tok = dir.path().join("tok");
    ok(&[
        "tokenizer-train",
        "--records",
        path(&fx.join("records.jsonl")),
        "--vocab-size",
        "300",
        "--out-dir",
        path(&tok),
    ]);
    let train = |extra: &str| {
        failure(&[
            "train",
            "--train",
            path(&fx.join("records.jsonl")),
            "--tokenizer",
            path(&tok.join("tokenizer.json")),
            "--out-dir",
            path(&out),
            extra,
        ])
    };
    for extra in [
        "model.dpth=3",
        "model=lstm",
        "model.depth=deep",
        "model.vocab=17",
        "noequals",
    ] {
        let (code, err) = train(extra);
        assert_eq!(code, 2, "{extra}: {err}");
    }
    let (code, _) = failure(&["--jobs", "0", "synth", "--kind", "split", "--out-dir", path(&out)]);
    assert_eq!(code, 2);
}

#[test]
fn grad_check_runs_a_reduced_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let stdout = ok(&[
        "grad-check",
        "--op-seeds",
        "2",
        "--model-seeds",
        "1",
        "--out-dir",
        path(&out),
    ]);
    assert!(stdout.lines().all(|l| l.starts_with("ok")));
    let report = read_json(&out.join("grad_report.json"));
    assert!(report["entries"].as_array().unwrap().len() >= 20);
}

/// Desk-preset dual model on the 50-article extraction fixture, end to end:
/// tokenizer, training with snapshots, ensemble decoding and evaluation.
#[test]
fn train_decode_evaluate_overfits_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    ok(&[
        "--seed",
        "7",
        "synth",
        "--kind",
        "extraction",
        "--count",
        "50",
        "--out-dir",
        path(&fx),
    ]);
    let records = fx.join("records.jsonl");
    let tok = dir.path().join("tok");
    ok(&[
        "tokenizer-train",
        "--records",
        path(&records),
        "--vocab-size",
        "800",
        "--out-dir",
        path(&tok),
    ]);
    let run = dir.path().join("run");
    ok(&[
        "--seed",
        "1",
        "--jobs",
        "1",
        "train",
        "--train",
        path(&records),
        "--tokenizer",
        path(&tok.join("tokenizer.json")),
        "--truecaser",
        path(&tok.join("truecaser.json")),
        "--out-dir",
        path(&run),
        "model=dual",
        "mode=multi",
        "preset=desk",
        "fit.checkpoint_every=1000",
    ]);
    let cfg = read_json(&run.join("resolved_config.json"));
    assert_eq!(cfg["resolved"]["fit"]["max_steps"], 2000);
    assert_eq!(cfg["resolved"]["architecture"], "dual");
    let log = fs::read_to_string(run.join("log.jsonl")).unwrap();
    assert!(log.lines().count() >= 40);

    let dec = dir.path().join("dec");
    ok(&[
        "decode",
        "--checkpoint",
        path(&run.join("model.ckpt")),
        "--ensemble",
        path(&run.join("checkpoint-2000.ckpt")),
        "--records",
        path(&records),
        "--beam",
        "4",
        "--out-dir",
        path(&dec),
    ]);
    let ev = dir.path().join("ev");
    ok(&[
        "evaluate",
        "--predictions",
        path(&dec.join("predictions.jsonl")),
        "--gold",
        path(&records),
        "--out-dir",
        path(&ev),
    ]);
    let mm = read_json(&ev.join("metrics.json"))["mean_multilabel_f1"]
        .as_f64()
        .unwrap();
    assert!(mm >= 0.95, "MM-F1 {mm}");

    ok(&[
        "decode",
        "--checkpoint",
        path(&run.join("model.ckpt")),
        "--records",
        path(&records),
        "--truecase",
        "--ablate-article",
        "--beam",
        "1",
        "--out-dir",
        path(&dir.path().join("dec2")),
    ]);
}
