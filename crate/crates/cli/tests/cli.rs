use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mctscritic"));
    c.env_remove("MCTSCRITIC_BASE_URL").env("RUST_LOG", "error");
    c
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mock(args: &[&str]) -> Output {
    bin()
        .args(["--backend", "mock", "--config"])
        .arg(fixture("run.toml"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_lines(p: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn search_mine_filter_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("trees");
    let out = mock(&["search", s(&fixture("questions.jsonl")), "--out", s(&trees)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dumps: Vec<_> = fs::read_dir(&trees)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".tree.jsonl")
        })
        .collect();
    assert_eq!(dumps.len(), 10);

    let samples = dir.path().join("samples.jsonl");
    let out = mock(&["mine", s(&trees), "--out", s(&samples)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let header: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&samples).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(header["record"], "header");
    assert_eq!(header["schema_version"], 1);
    let mined = data_lines(&samples);
    assert!(mined.iter().any(|r| r["provenance"] == "positive"));
    assert!(mined.iter().any(|r| r["provenance"] == "negative_mined"));

    let filtered = dir.path().join("filtered.jsonl");
    let out = mock(&["filter", s(&samples), "--out", s(&filtered)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("filtered.jsonl.report.json")).unwrap()).unwrap();
    // Question i's refinements succeed i times out of ten, so i ≥ 3 passes.
    assert_eq!(report["positives"], 10);
    assert_eq!(report["kept"], 14);
    assert_eq!(report["discarded"], 6);
    let kept = data_lines(&filtered);
    assert_eq!(kept.len(), 24);
    for r in kept.iter().filter(|r| r["provenance"] == "negative_mined") {
        assert!(r["filter_stats"]["successes"].as_u64().unwrap() >= 3);
    }
}

#[test]
fn infer_prints_iteration_table() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces.jsonl");
    let out = mock(&["infer", s(&fixture("questions.jsonl")), "--out", s(&traces)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("iter") && table.contains("N_refine"), "{table}");
    assert_eq!(data_lines(&traces).len(), 10);
    assert!(dir.path().join("traces.jsonl.report.json").exists());
}

#[test]
fn losses_reports_each_record() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("recs.jsonl");
    fs::write(
        &recs,
        "{\"probs\":[0.25,0.25,0.25],\"label\":1,\"score\":0.5}\n{\"probs\":[1.0],\"label\":0,\"score\":0.5,\"lambda\":0.0}\n",
    )
    .unwrap();
    let out = bin().args(["losses", s(&recs)]).output().unwrap();
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ln4 = 4f64.ln();
    assert!((lines[0]["lm_loss"].as_f64().unwrap() - 3.0 * ln4).abs() < 1e-12);
    assert!((lines[0]["total_loss"].as_f64().unwrap() - 3.0 * ln4 - 2f64.ln()).abs() < 1e-12);
    assert_eq!(lines[1]["total_loss"].as_f64().unwrap(), 0.0);
}

#[test]
fn bad_loss_record_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let recs = dir.path().join("recs.jsonl");
    fs::write(&recs, "{\"probs\":[0.0],\"label\":1,\"score\":0.5}\n").unwrap();
    let out = bin().args(["losses", s(&recs)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_2_naming_the_path() {
    let out = bin()
        .args(["--config", "/nonexistent/run.toml", "search", "q.jsonl", "--out", "x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["search"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn unreachable_backend_exits_3_with_partial_trees() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("trees");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "[gateway]\nmax_retries = 0\n[remote]\nbase_url = \"http://127.0.0.1:9/v1\"\ntimeout_secs = 2\n",
    )
    .unwrap();
    let out = bin()
        .args([
            "--config",
            s(&cfg),
            "search",
            s(&fixture("questions.jsonl")),
            "--out",
            s(&trees),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(trees.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["partial"].as_array().unwrap().len(), 10);
}

#[test]
fn base_url_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    let out = bin()
        .env("MCTSCRITIC_BASE_URL", "http://127.0.0.1:9/v1")
        .args([
            "--config",
            s(&fixture("run.toml")),
            "infer",
            s(&fixture("questions.jsonl")),
            "--out",
            s(&traces),
        ])
        .output()
        .unwrap();
    // Remote backend against a closed port: every question fails.
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("10 questions failed"));
}

#[test]
fn seed_flag_changes_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("trees");
    assert!(mock(&["search", s(&fixture("questions.jsonl")), "--out", s(&trees)])
        .status
        .success());
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    assert!(mock(&["mine", s(&trees), "--out", s(&a)]).status.success());
    assert!(mock(&["--seed", "99", "mine", s(&trees), "--out", s(&b)])
        .status
        .success());
    let head = |p: &Path| fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
    assert_ne!(head(&a), head(&b));
}
