use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const MOCK_DIGEST: &str = "60eeaeef8a0890428e83e5f1fc731dede1337310d69f10653390ca3383a62afc";

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn add_two_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/add_two")
}

fn passtune(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_passtune"));
    for (k, _) in std::env::vars_os() {
        if k.to_string_lossy().starts_with("PASSTUNE_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = passtune(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn autotune(store: &Path, extra: &[&str]) -> String {
    let corpus = data("mock_corpus");
    let mut args = vec![
        "--backend",
        "mock",
        "autotune",
        "--corpus",
        corpus.to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
        "--trials",
        "100",
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

fn snapshot_digest(store: &Path) -> String {
    let digest = Sha256::digest(fs::read(store.join("snapshot.json")).unwrap());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn autotune_mock_corpus_digest() {
    for workers in ["1", "4"] {
        let dir = tempfile::tempdir().unwrap();
        autotune(dir.path(), &["--workers", workers]);
        assert_eq!(snapshot_digest(dir.path()), MOCK_DIGEST, "workers {workers}");
    }
}

#[test]
fn interrupted_autotune_resumes_to_the_same_store() {
    let dir = tempfile::tempdir().unwrap();
    let first = autotune(dir.path(), &["--stop-after", "120", "--workers", "3"]);
    assert!(first.contains("interrupted"));
    autotune(dir.path(), &["--workers", "2"]);
    assert_eq!(snapshot_digest(dir.path()), MOCK_DIGEST);
}

#[test]
fn resuming_with_another_seed_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    autotune(dir.path(), &["--stop-after", "10"]);
    let out = passtune(&[
        "--backend",
        "mock",
        "autotune",
        "--corpus",
        data("mock_corpus").to_str().unwrap(),
        "--store",
        dir.path().to_str().unwrap(),
        "--seed",
        "8",
    ]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().to_str().unwrap();
    let suite = data("mock_suite/m.json");
    autotune(dir.path(), &[]);
    let stages: [&[&str]; 3] = [
        &["minimize"],
        &["broadcast", "--top-k", "5"],
        &["validate", "--suite", suite.to_str().unwrap()],
    ];
    let run_all = || {
        for stage in stages {
            let mut args = vec!["--backend", "mock", "--store", store];
            args.extend_from_slice(stage);
            ok(&args);
        }
    };
    run_all();
    let log = fs::read(dir.path().join("log.jsonl")).unwrap();
    let snap = snapshot_digest(dir.path());
    run_all();
    assert_eq!(fs::read(dir.path().join("log.jsonl")).unwrap(), log);
    assert_eq!(snapshot_digest(dir.path()), snap);
    let report = ok(&["--backend", "mock", "--store", store, "minimize"]);
    assert!(report.contains("3 already minimal"), "{report}");
}

#[test]
fn emit_dataset_reproduces_golden_listings() {
    let fixture = add_two_dir();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("records.jsonl");
    ok(&[
        "--backend",
        &format!("replay:{}", fixture.display()),
        "emit-dataset",
        "--corpus",
        fixture.to_str().unwrap(),
        "--disasm-source",
        "as-emitted",
        "--output",
        out.to_str().unwrap(),
    ]);
    let records: Vec<serde_json::Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let find = |id: &str, task: &str| {
        records
            .iter()
            .find(|r| r["program_id"] == id && r["task"] == task)
            .unwrap_or_else(|| panic!("no {task} record for {id}"))
    };
    let golden = |f: &str| fs::read_to_string(fixture.join("golden").join(f)).unwrap();
    for (id, task, stem) in [
        ("add_two", "emulate-ir", "emulate_ir"),
        ("add_two", "emulate-asm", "emulate_asm"),
        ("add_two", "flag-tune", "flag_tune"),
        ("add_two.oz", "flag-tune", "flag_tune_no_improvement"),
        ("add_two", "disassemble", "disassemble"),
    ] {
        let r = find(id, task);
        assert_eq!(r["prompt"].as_str().unwrap(), golden(&format!("{stem}.prompt")), "{stem}");
        assert_eq!(r["label"].as_str().unwrap(), golden(&format!("{stem}.label")), "{stem}");
    }
}

#[test]
fn eval_flags_all_equal_to_oz() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("r.jsonl");
    fs::write(
        &results,
        "{\"program_id\":\"a\",\"candidate\":53,\"oz\":53}\n{\"program_id\":\"b\",\"candidate\":10,\"oz\":10}\n",
    )
    .unwrap();
    let report = ok(&["--backend", "mock", "eval-flags", "--results", results.to_str().unwrap()]);
    let line = report.lines().find(|l| l.starts_with("improvement over -Oz")).unwrap();
    let cols: Vec<&str> = line.split_whitespace().collect();
    assert_eq!(&cols[cols.len() - 2..], ["0.00%", "0.00%"]);
}

#[test]
fn eval_disasm_scores_reference_pairs() {
    let fixture = add_two_dir();
    let backend = format!("replay:{}", fixture.display());
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("records.jsonl");
    ok(&[
        "--backend",
        &backend,
        "emit-dataset",
        "--task",
        "disassemble",
        "--corpus",
        fixture.to_str().unwrap(),
        "--disasm-source",
        "as-emitted",
        "--output",
        out.to_str().unwrap(),
    ]);
    let report = ok(&["--backend", &backend, "--format", "jsonl", "eval-disasm", "--pairs", out.to_str().unwrap()]);
    let summary: serde_json::Value = serde_json::from_str(report.lines().last().unwrap()).unwrap();
    assert_eq!(summary["summary"]["n_exact"], 2);
    assert_eq!(summary["summary"]["mean_bleu"], 1.0);
}

#[test]
fn flags_beat_env_and_env_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "backend = \"mock\"\ntrials = 2\nseed = 7\n").unwrap();
    let corpus = data("mock_corpus");
    let run = |env: Option<&str>, flag: Option<&str>| -> u64 {
        let store = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_passtune"));
        cmd.env_remove("PASSTUNE_TRIALS");
        if let Some(v) = env {
            cmd.env("PASSTUNE_TRIALS", v);
        }
        cmd.args(["--config", config.to_str().unwrap(), "--format", "jsonl", "autotune"]);
        cmd.args(["--corpus", corpus.to_str().unwrap(), "--store", store.path().to_str().unwrap()]);
        if let Some(v) = flag {
            cmd.args(["--trials", v]);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        first["trials"].as_u64().unwrap()
    };
    assert_eq!(run(None, None), 2);
    assert_eq!(run(Some("3"), None), 3);
    assert_eq!(run(Some("3"), Some("4")), 4);
}

#[test]
fn bad_input_exits_nonzero() {
    let out = passtune(&["--backend", "gcc", "broadcast", "--store", "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown backend"));
    let dir = tempfile::tempdir().unwrap();
    let out = passtune(&["--backend", "mock", "autotune", "--corpus", dir.path().to_str().unwrap(), "--store", "s"]);
    assert!(!out.status.success());
}
