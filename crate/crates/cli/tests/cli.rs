//! End-to-end tests of the `currl` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use currl_core::{DifficultyRecord, Sample};
use serde_json::Value;

const SMALL: &[&str] = &[
    "--n-tasks", "60", "--k", "3", "--m", "8", "--tf", "4", "--max-steps", "60", "--batch-size", "4", "--group-size", "4",
];

fn currl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_currl")).args(args).output().expect("spawn currl")
}

fn ok(args: &[&str]) -> Output {
    let out = currl(args);
    assert!(
        out.status.success(),
        "currl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join(name)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).unwrap());
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn read_jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn sample(id: &str, dataset: &str) -> Sample {
    Sample {
        id: id.into(),
        dataset: dataset.into(),
        prompt: format!("prompt {id}"),
        answer: "42".into(),
        meta: Default::default(),
    }
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn help_text_matches_golden() {
    let cases: &[(&str, &[&str])] = &[
        ("currl", &[]),
        ("estimate", &["estimate"]),
        ("estimate-coarse", &["estimate", "coarse"]),
        ("estimate-sample", &["estimate", "sample"]),
        ("estimate-fine", &["estimate", "fine"]),
        ("estimate-partition", &["estimate", "partition"]),
        ("simulate", &["simulate"]),
        ("corpus", &["corpus"]),
        ("replay", &["replay"]),
    ];
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, args) in cases {
        let mut full = args.to_vec();
        full.push("--help");
        let text = String::from_utf8(ok(&full).stdout).unwrap();
        let path = fixture(&format!("golden/{name}.help.txt"));
        if update {
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            fs::write(&path, &text).unwrap();
        }
        let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(text, want, "help of {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
    }
}

#[test]
fn fine_with_stub_oracle_reports_exact_difficulties() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let counts = dir.path().join("counts.jsonl");
    let out = dir.path().join("fine.jsonl");
    let samples: Vec<Sample> = (0..11).map(|i| sample(&format!("q{i:02}"), "d")).collect();
    write_jsonl(&data, &samples);
    // q10 has no entry and must come back as a failure
    let rows: Vec<Value> = (0..10)
        .map(|i| serde_json::json!({"sample_id": format!("q{i:02}"), "attempts": 100, "correct": i * 10 + 5}))
        .collect();
    write_jsonl(&counts, &rows);
    ok(&["estimate", "fine", "--data", p(&data), "--oracle", "stub", "--counts", p(&counts), "--n", "100", "--out", p(&out)]);
    let recs = read_jsonl(&out);
    assert_eq!(recs.len(), 11);
    for (i, r) in recs.iter().take(10).enumerate() {
        let c = i as u32 * 10 + 5;
        assert_eq!(r["sample_id"], format!("q{i:02}"));
        assert_eq!(r["fine_correct"], c);
        assert_eq!(r["n_fine"], 100);
        assert_eq!(r["difficulty"].as_f64().unwrap(), f64::from(100 - c) / 100.0);
    }
    assert_eq!(recs[10]["failed"], true);
    assert!(recs[10]["difficulty"].is_null());
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("fine.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"][0]["path"], p(&out));
}

#[test]
fn sample_draws_absolute_targets() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let coarse = dir.path().join("coarse.jsonl");
    let out = dir.path().join("drawn.jsonl");
    let mut samples = Vec::new();
    let mut records = Vec::new();
    for (bin, (n, correct)) in [(2500, 0u32), (3500, 2), (6000, 5)].into_iter().enumerate() {
        for i in 0..n {
            let id = format!("b{bin}-{i:05}");
            samples.push(sample(&id, ["alpha", "beta", "gamma"][i % 3]));
            records.push(DifficultyRecord::coarse(id, correct, 5));
        }
    }
    write_jsonl(&data, &samples);
    write_jsonl(&coarse, &records);
    ok(&["estimate", "sample", "--data", p(&data), "--coarse", p(&coarse), "--targets", "2000,3000,5000", "--seed", "3", "--out", p(&out)]);
    let drawn = read_jsonl(&out);
    assert_eq!(drawn.len(), 10_000);
    for (bin, want) in [2000, 3000, 5000].into_iter().enumerate() {
        let prefix = format!("b{bin}-");
        assert_eq!(drawn.iter().filter(|s| s["id"].as_str().unwrap().starts_with(&prefix)).count(), want);
    }
    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("drawn.jsonl.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["targets"], serde_json::json!([2000, 3000, 5000]));
    assert_eq!(summary["bin_sizes"], serde_json::json!([2500, 3500, 6000]));
    let g1: u64 = summary["contributions"]["G1"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(g1, 2000);
    // equal datasets get equal shares
    assert!(summary["contributions"]["G3"].as_object().unwrap().values().all(|v| v.as_u64().unwrap().abs_diff(1667) <= 1));
}

#[test]
fn partition_of_ten_records_into_four_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let recs_path = dir.path().join("fine.jsonl");
    let out = dir.path().join("partition.json");
    let recs: Vec<DifficultyRecord> = (0..10).map(|i| DifficultyRecord::fine(format!("r{i}"), 90 - i * 8, 100)).collect();
    write_jsonl(&recs_path, &recs);
    ok(&["estimate", "partition", "--records", p(&recs_path), "--k", "4", "--out", p(&out)]);
    let summary: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(summary["bucket_sizes"], serde_json::json!([3, 3, 2, 2]));
    assert_eq!(summary["retained"], 10);
    let curriculum: Vec<&str> = summary["curriculum"].as_array().unwrap().iter().map(|r| r["sample_id"].as_str().unwrap()).collect();
    assert_eq!(curriculum, ["r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9"]);
    assert_eq!(summary["buckets"][0]["sample_ids"], serde_json::json!(["r0", "r1", "r2"]));
}

#[test]
fn pipeline_with_sim_oracle_is_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["corpus", "--n-tasks", "300", "--seed", "2", "--out", p(&d("data.jsonl")), "--policy-out", p(&d("policy.json"))]);
    for workers in ["1", "4"] {
        ok(&[
            "estimate", "coarse", "--data", p(&d("data.jsonl")), "--oracle", "sim", "--policy", p(&d("policy.json")),
            "--workers", workers, "--seed", "9", "--out", p(&d(&format!("coarse{workers}.jsonl"))),
        ]);
    }
    assert_eq!(fs::read(d("coarse1.jsonl")).unwrap(), fs::read(d("coarse4.jsonl")).unwrap());
    ok(&[
        "estimate", "sample", "--data", p(&d("data.jsonl")), "--coarse", p(&d("coarse1.jsonl")), "--ratios", "1,1,1",
        "--out", p(&d("drawn.jsonl")),
    ]);
    ok(&[
        "estimate", "fine", "--data", p(&d("drawn.jsonl")), "--oracle", "sim", "--policy", p(&d("policy.json")),
        "--coarse", p(&d("coarse1.jsonl")), "--out", p(&d("fine.jsonl")),
    ]);
    let fine = read_jsonl(&d("fine.jsonl"));
    assert_eq!(fine.len(), 300);
    assert!(fine.iter().all(|r| r["n_fine"] == 100 && !r["coarse_bin"].is_null()));
    ok(&["estimate", "partition", "--records", p(&d("fine.jsonl")), "--out", p(&d("partition.json"))]);
}

fn simulate_bytes(dir: &Path, extra: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut args = vec!["simulate"];
    for pair in SMALL.chunks(2) {
        if !extra.contains(&pair[0]) {
            args.extend_from_slice(pair);
        }
    }
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", p(dir)]);
    ok(&args);
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    for extra in [&["--seed", "4"][..], &["--mode", "shuffled", "--seeds", "1,2"], &["--rounds", "2", "--seed", "7"]] {
        let first = simulate_bytes(&out, extra);
        fs::remove_dir_all(&out).unwrap();
        let second = simulate_bytes(&out, extra);
        fs::remove_dir_all(&out).unwrap();
        assert!(!first.is_empty());
        assert_eq!(first, second, "outputs of {extra:?} differ between runs");
    }
}

#[test]
fn paired_writes_comparison_at_equal_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let files = simulate_bytes(dir.path(), &["--paired", "--seeds", "1..2", "--no-events"]);
    let names: Vec<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"comparison.csv"));
    assert!(!names.iter().any(|n| n.ends_with(".events.jsonl")));
    let (_, csv) = files.iter().find(|(n, _)| n == "comparison.csv").unwrap();
    let text = String::from_utf8(csv.clone()).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for seed_rows in rows.chunks(3) {
        let modes: Vec<&str> = seed_rows.iter().map(|r| r[1]).collect();
        assert_eq!(modes, ["adacurl", "naive-cl", "shuffled"]);
        let budget: usize = seed_rows[0][2].parse().unwrap();
        assert_eq!(seed_rows[2][2].parse::<usize>().unwrap(), budget);
        assert!(seed_rows[1][2].parse::<usize>().unwrap() <= budget);
    }
}

#[test]
fn single_bucket_run_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    simulate_bytes(dir.path(), &["--k", "1", "--seed", "3"]);
    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("adacurl-seed3.summary.json")).unwrap()).unwrap();
    let round = &summary["rounds"][0];
    assert_eq!(round["frontier_k"], 1);
    assert_eq!(round["merges"].as_array().unwrap().len(), 0);
    assert_eq!(round["bucket_sizes"].as_array().unwrap().len(), 1);
    let events = dir.path().join("adacurl-seed3.events.jsonl");
    let metrics = dir.path().join("adacurl-seed3.metrics.csv");
    ok(&["replay", "--events", p(&events), "--metrics", p(&metrics)]);
}

#[test]
fn replay_accepts_fresh_logs_and_flags_tampering() {
    let dir = tempfile::tempdir().unwrap();
    simulate_bytes(dir.path(), &["--mode", "naive-cl", "--rounds", "2", "--seed", "1"]);
    let events = dir.path().join("naive-cl-seed1.events.jsonl");
    let metrics = dir.path().join("naive-cl-seed1.metrics.csv");
    let report = dir.path().join("replay.json");
    ok(&["replay", "--events", p(&events), "--metrics", p(&metrics), "--out", p(&report)]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["rounds"], 2);
    assert!(r["merges"].as_u64().unwrap() >= 2);

    let mut lines = read_jsonl(&events);
    let (idx, step) = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l["event"] == "report" && l["step"].as_u64().unwrap() >= 20)
        .map(|(i, l)| (i, l["step"].as_u64().unwrap()))
        .next()
        .unwrap();
    let first = lines[idx]["payload"]["rewards"][0].as_f64().unwrap();
    lines[idx]["payload"]["rewards"][0] = Value::from(1.0 - first);
    let tampered = dir.path().join("tampered.jsonl");
    write_jsonl(&tampered, &lines);
    let out = currl(&["replay", "--events", p(&tampered)]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_line(&out);
    assert_eq!(err["error"], "replay-divergence");
    assert_eq!(err["step"], step);
}

#[test]
fn replay_accepts_log_from_older_engine() {
    let events = fixture("fixtures/naive-cl-v0.2.0.events.jsonl");
    let metrics = fixture("fixtures/naive-cl-v0.2.0.metrics.csv");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("replay.json");
    ok(&["replay", "--events", p(&events), "--metrics", p(&metrics), "--out", p(&report)]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["engine_versions"], serde_json::json!(["0.2.0"]));
    assert_eq!(r["merges"], 2);
}

#[test]
fn errors_are_json_and_leave_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = currl(&["estimate", "partition", "--records", "does-not-exist.jsonl", "--out", p(&dir.path().join("x.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_line(&out);
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("does-not-exist.jsonl"));

    let data = dir.path().join("data.jsonl");
    let policy = dir.path().join("missing-dir").join("policy.json");
    let out = currl(&["corpus", "--n-tasks", "20", "--out", p(&data), "--policy-out", p(&policy)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!data.exists(), "partial dataset left behind");
    assert!(!dir.path().join("data.jsonl.manifest.json").exists());

    let out = currl(&["simulate", "--k", "0", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["error"], "invalid-config");

    let out = currl(&["simulate", "--paired", "--rounds", "2", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));

    let out = currl(&["estimate", "sample", "--data", "a", "--coarse", "b", "--ratios", "0.5,2,0.1", "--out", "c"]);
    assert_eq!(out.status.code(), Some(2));
    let out = currl(&["simulate", "--seeds", "5..1", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
