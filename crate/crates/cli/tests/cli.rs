use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use softalloc::signals_io::{read_plan, read_signals};
use softalloc::toymodel::{write_checkpoint, ToyModel, ToyModelConfig};

fn softalloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_softalloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn ok(args: &[&str]) -> Output {
    let out = softalloc(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_TASK: &str = r#"{"n_chunks":2,"chunk_len":16,"needle_position":0,"key_alphabet":8,
"value_alphabet":4,"value_len":2,"pairs_per_chunk":1,"trials":4,"seed":3}"#;

const TINY_MODEL: &[&str] = &["--d-model", "8", "--heads", "2", "--d-ff", "16", "--layers", "1", "--chunk-len", "16"];

/// Writes a tiny task config and a matching corpus into `dir`.
fn tiny_corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let task = dir.join("task.json");
    fs::write(&task, TINY_TASK).unwrap();
    let corpus = dir.join("corpus.jsonl");
    ok(&["gen-corpus", "--task", p(&task), "--examples", "40", "--seed", "1", "--out", p(&corpus)]);
    (task, corpus)
}

fn train_tiny(dir: &Path, corpus: &Path, steps: &str, name: &str) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train-toy", "--corpus", p(corpus), "--steps", steps, "--seed", "5", "--out", p(&out)];
    args.extend_from_slice(TINY_MODEL);
    ok(&args);
    out
}

fn write_trace(path: &Path, ppl: &[f64], attn: &[f64]) {
    let lines: Vec<String> = ppl
        .iter()
        .zip(attn)
        .enumerate()
        .map(|(i, (p, a))| format!(r#"{{"doc_id":"d","chunk_id":{i},"len":32,"ppl":{p},"attn":{a}}}"#))
        .collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn plan_counts(path: &Path) -> Vec<usize> {
    read_plan(path).unwrap().0.counts
}

#[test]
fn every_command_has_help() {
    for cmd in ["train-toy", "score", "allocate", "bench", "gradcheck", "gen-corpus"] {
        let out = softalloc(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert!(softalloc(&["--help"]).status.success());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(softalloc(&[]).status.code(), Some(1));
    assert_eq!(softalloc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(softalloc(&["allocate", "--budget", "nope"]).status.code(), Some(1));
}

#[test]
fn missing_corpus_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = softalloc(&["train-toy", "--steps", "1", "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--corpus"));

    let out = softalloc(&["train-toy", "--corpus", "/no/such/file", "--out", p(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--corpus"));
}

#[test]
fn zero_steps_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = tiny_corpus(dir.path());
    let ckpt = train_tiny(dir.path(), &corpus, "0", "init.ckpt");
    let model = ToyModel::new(ToyModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        seed: 5,
        ..ToyModelConfig::default()
    })
    .unwrap();
    let mut expected = Vec::new();
    write_checkpoint(&model, &mut expected).unwrap();
    assert_eq!(fs::read(&ckpt).unwrap(), expected);
    assert_eq!(fs::read_to_string(dir.path().join("init.ckpt.loss.csv")).unwrap(), "step,loss\n");
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = tiny_corpus(dir.path());
    let a = train_tiny(dir.path(), &corpus, "3", "a.ckpt");
    let b = train_tiny(dir.path(), &corpus, "3", "b.ckpt");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(dir.path().join("a.ckpt.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn score_writes_one_normalized_record_per_chunk() {
    let dir = tempfile::tempdir().unwrap();
    let (_, corpus) = tiny_corpus(dir.path());
    let model = train_tiny(dir.path(), &corpus, "0", "m.ckpt");
    let doc = dir.path().join("doc.txt");
    fs::write(&doc, "the quick brown fox jumps over the lazy dog and keeps running far away").unwrap();
    let n_bytes = fs::metadata(&doc).unwrap().len() as usize;
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["score", "--model", p(&model), "--input", p(&doc), "--chunk-len", "16", "--query", "fox", "--out", p(&out)]);
        out
    };
    let a = run("a.jsonl");
    let traces = read_signals(&a).unwrap();
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].doc_id, "doc");
    assert_eq!(traces[0].chunks.len(), n_bytes.div_ceil(16));
    let attn: f64 = traces[0].chunks.iter().map(|c| c.attn).sum();
    assert!((attn - 1.0).abs() < 1e-6);
    assert_eq!(traces[0].chunks.last().unwrap().len, n_bytes - 16 * (n_bytes / 16));
    let b = run("b.jsonl");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn uniform_plan_on_four_chunks() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    write_trace(&trace, &[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4]);
    let out = dir.path().join("p.json");
    ok(&["allocate", "--trace", p(&trace), "--budget", "8", "--strategy", "uniform", "--out", p(&out)]);
    assert_eq!(plan_counts(&out), vec![2, 2, 2, 2]);
}

#[test]
fn dynamic_plan_matches_hand_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    write_trace(&trace, &[3.0, 1.0], &[0.5, 0.5]);
    let out = dir.path().join("p.json");
    ok(&["allocate", "--trace", p(&trace), "--budget", "8", "--alpha", "0.5", "--out", p(&out)]);
    let (plan, scores) = read_plan(&out).unwrap();
    assert_eq!(plan.counts, vec![4, 4]);
    assert!((scores.s[0] - 0.43782).abs() < 1e-5);
    assert!((scores.s[1] - 0.56218).abs() < 1e-5);
}

#[test]
fn rates_flag_controls_reallocation() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    write_trace(&trace, &[1.0, 1.0, 1.0], &[0.7, 0.2, 0.1]);
    let raw = dir.path().join("raw.json");
    let snapped = dir.path().join("snapped.json");
    let common = ["allocate", "--trace", p(&trace), "--budget", "20", "--alpha", "1"];
    ok(&[&common[..], &["--out", p(&raw)]].concat());
    ok(&[&common[..], &["--rates", "--out", p(&snapped)]].concat());
    let raw_counts = plan_counts(&raw);
    assert_eq!(raw_counts.iter().sum::<usize>(), 20);
    let valid = [1, 2, 4, 8, 16];
    let (plan, _) = read_plan(&snapped).unwrap();
    assert!(plan.counts.iter().all(|c| valid.contains(c)), "{:?}", plan.counts);
    assert_eq!(plan.total() + plan.residual, 20);
    assert_ne!(plan.counts, raw_counts);
}

#[test]
fn allocate_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    write_trace(&trace, &[1.0, 2.0], &[0.5, 0.5]);
    let out = dir.path().join("p.json");
    let bad = softalloc(&["allocate", "--trace", p(&trace), "--budget", "1", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = softalloc(&["allocate", "--trace", p(&trace), "--budget", "8", "--rates", "3", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("does not divide"));
    let bad = softalloc(&["allocate", "--trace", p(&trace), "--budget", "8", "--strategy", "greedy", "--out", p(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn unknown_sweep_kind_lists_valid_kinds() {
    let out = softalloc(&["bench", "--model", "m", "--kind", "sideways", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    for kind in ["position", "strategy", "constraint", "alpha"] {
        assert!(msg.contains(kind), "{msg}");
    }
}

#[test]
fn single_trial_bench_writes_parseable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (task, corpus) = tiny_corpus(dir.path());
    let model = train_tiny(dir.path(), &corpus, "40", "m.ckpt");
    let stem = dir.path().join("report");
    let start = Instant::now();
    ok(&[
        "bench", "--model", p(&model), "--task", p(&task), "--kind", "constraint", "--trials", "1",
        "--budgets", "8,4", "--out", p(&stem),
    ]);
    assert!(start.elapsed().as_secs() < 60);
    let rows = softalloc::bench::BenchReport::read_rows(stem.with_extension("csv")).unwrap();
    assert_eq!(rows.len(), 3 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["kind"], "constraint");
    assert_eq!(summary["conditions"].as_array().unwrap().len(), 6);
}

#[test]
fn gradcheck_passes_by_default() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("PASS"), "{text}");
    assert!(text.contains("max_rel_error="));
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let out = softalloc(&["gradcheck", "--samples", "20", "--tolerance", "1e-15"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("FAIL"));

    let out = softalloc(&["gradcheck", "--samples", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("samples must be ≥ 1"));
}
