//! Drives the installed binary end to end: artifact layout, determinism,
//! exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relex() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relex"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn relex")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn make_corpus(dir: &Path, bags: u32, noise: &str, seed: u32) {
    let out = run(relex()
        .arg("make-synthetic")
        .arg("--out-dir")
        .arg(dir)
        .args(["--relations", "3", "--train-bags"])
        .arg(bags.to_string())
        .args(["--test-bags", "12", "--noise", noise, "--seed"])
        .arg(seed.to_string()));
    assert_ok(&out);
}

fn json_line(path: &Path, index: usize) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().nth(index).unwrap()).unwrap()
}

#[test]
fn prepare_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 20, "0.1", 3);
    let raw = dir.path().join("data/train.jsonl");
    let once = dir.path().join("once.jsonl");
    let twice = dir.path().join("twice.jsonl");

    let out = run(relex()
        .arg("prepare")
        .arg("--input")
        .arg(&raw)
        .arg("--output")
        .arg(&once)
        .args(["--split", "train"]));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rejected records: 0"), "stdout: {stdout}");

    let out = run(relex()
        .arg("prepare")
        .arg("--input")
        .arg(&once)
        .arg("--output")
        .arg(&twice)
        .args(["--split", "train"]));
    assert_ok(&out);
    assert_eq!(fs::read(&once).unwrap(), fs::read(&twice).unwrap());
    // generator output already carries the annotations, so one pass is identity
    assert_eq!(fs::read(&raw).unwrap(), fs::read(&once).unwrap());
}

#[test]
fn prepare_collects_malformed_records_and_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 6, "0.0", 5);
    let good = fs::read_to_string(dir.path().join("data/train.jsonl")).unwrap();
    let good_line = good.lines().next().unwrap();

    // line 2 is not a record, line 3 has a truncated head array
    let mut broken: serde_json::Value = serde_json::from_str(good_line).unwrap();
    broken["dep_heads"].as_array_mut().unwrap().pop();
    let mixed = dir.path().join("mixed.jsonl");
    fs::write(&mixed, format!("{good_line}\nnot a record\n{broken}\n")).unwrap();

    let out_path = dir.path().join("out.jsonl");
    let out = run(relex()
        .arg("prepare")
        .arg("--input")
        .arg(&mixed)
        .arg("--output")
        .arg(&out_path)
        .args(["--split", "train"]));
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
    assert!(stderr.contains("line 3"), "stderr: {stderr}");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("rejected records: 2"), "stdout: {stdout}");
    // the valid record still came through
    assert_eq!(fs::read_to_string(&out_path).unwrap().lines().count(), 1);
}

#[test]
fn prepare_empty_input_empty_output_zero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty.jsonl");
    let output = dir.path().join("out.jsonl");
    fs::write(&input, "").unwrap();
    let out = run(relex()
        .arg("prepare")
        .arg("--input")
        .arg(&input)
        .arg("--output")
        .arg(&output));
    assert_ok(&out);
    assert_eq!(fs::read_to_string(&output).unwrap(), "");
    assert!(String::from_utf8_lossy(&out.stdout).contains("sentences: 0"));
}

#[test]
fn same_seed_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 16, "0.1", 7);
    let data = dir.path().join("data/train.jsonl");
    for sub in ["a", "b"] {
        let out = run(relex()
            .arg("train")
            .arg("--train-data")
            .arg(&data)
            .arg("--out-dir")
            .arg(dir.path().join(sub))
            .args(["--epochs", "2", "--learning-rate", "1e-3", "--seed", "11"]));
        assert_ok(&out);
    }
    for file in ["tensors.safetensors", "manifest.json", "tokenizer.vocab", "train_log.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(file)).unwrap(),
            fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file} differs between same-seed runs"
        );
    }
}

#[test]
fn eval_then_plot_produce_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 16, "0.1", 9);
    let ckpt = dir.path().join("ckpt");
    let out = run(relex()
        .arg("train")
        .arg("--train-data")
        .arg(dir.path().join("data/train.jsonl"))
        .arg("--out-dir")
        .arg(&ckpt)
        .args(["--epochs", "1", "--learning-rate", "1e-3", "--seed", "4"]));
    assert_ok(&out);

    let eval_dir = dir.path().join("eval");
    let out = run(relex()
        .arg("eval")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--test-data")
        .arg(dir.path().join("data/test.jsonl"))
        .arg("--out-dir")
        .arg(&eval_dir));
    assert_ok(&out);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config_hash"], manifest["config_hash"]);
    assert!(metrics["auc"].as_f64().is_some());

    let csv = fs::read_to_string(eval_dir.join("pr_curve.csv")).unwrap();
    assert!(csv.starts_with("recall,precision\n"));

    let svg_path = dir.path().join("pr.svg");
    let out = run(relex()
        .arg("plot")
        .arg(eval_dir.join("pr_curve.csv"))
        .args(["--label", "run"])
        .arg("--output")
        .arg(&svg_path));
    assert_ok(&out);
    let svg = fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("<polyline"));
    assert!(svg.contains(">run</text>"));
}

#[test]
fn inspect_attention_rejects_attentionless_variant() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 10, "0.0", 2);
    let ckpt = dir.path().join("ckpt");
    let out = run(relex()
        .arg("train")
        .arg("--train-data")
        .arg(dir.path().join("data/train.jsonl"))
        .arg("--out-dir")
        .arg(&ckpt)
        .args(["--epochs", "1", "--ablation", "no_rel_attn", "--seed", "2"]));
    assert_ok(&out);

    let test_data = dir.path().join("data/test.jsonl");
    let id = json_line(&test_data, 0)["id"].as_str().unwrap().to_string();
    let out = run(relex()
        .arg("inspect-attention")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&test_data)
        .args(["--instance", &id]));
    assert_eq!(out.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no relation attention"));
}

#[test]
fn inspect_attention_prints_weight_table() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 10, "0.0", 6);
    let ckpt = dir.path().join("ckpt");
    let out = run(relex()
        .arg("train")
        .arg("--train-data")
        .arg(dir.path().join("data/train.jsonl"))
        .arg("--out-dir")
        .arg(&ckpt)
        .args(["--epochs", "1", "--seed", "6"]));
    assert_ok(&out);

    let test_data = dir.path().join("data/test.jsonl");
    let id = json_line(&test_data, 0)["id"].as_str().unwrap().to_string();
    let svg_path = dir.path().join("attn.svg");
    let out = run(relex()
        .arg("inspect-attention")
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&test_data)
        .args(["--instance", &id])
        .arg("--svg")
        .arg(&svg_path));
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[CLS]"), "stdout: {stdout}");
    assert!(stdout.contains("weight"));
    assert!(fs::read_to_string(&svg_path).unwrap().starts_with("<svg"));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(&dir.path().join("data"), 6, "0.0", 8);
    let out = run(relex()
        .arg("eval")
        .arg("--checkpoint")
        .arg(dir.path().join("nowhere"))
        .arg("--test-data")
        .arg(dir.path().join("data/test.jsonl"))
        .arg("--out-dir")
        .arg(dir.path().join("eval")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_noise_corpus_keeps_pattern_label_bijection() {
    let dir = tempfile::tempdir().unwrap();
    make_corpus(dir.path(), 30, "0.0", 12);
    let text = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let relation = rec["relation"].as_str().unwrap();
        let patterns: Vec<&str> = rec["tokens"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t.as_str().unwrap())
            .filter(|t| t.starts_with("pattern"))
            .collect();
        if relation == "NA" {
            assert!(patterns.is_empty(), "NA sentence carries {patterns:?}");
        } else {
            let expected = relation.replace("rel", "pattern");
            assert_eq!(patterns, vec![expected.as_str()], "relation {relation}");
        }
    }
}
