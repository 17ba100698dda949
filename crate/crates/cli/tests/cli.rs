use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

fn edgeloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgeloc"))
        .args(args)
        .current_dir(dir)
        .env_remove("EDGELOC_CACHE_DIR")
        .output()
        .unwrap()
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = edgeloc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Small corpus and a tiny one-epoch model in `dir`.
fn small_model(dir: &Path) -> Value {
    ok_json(dir, &["gen", "--out", "corpus", "--samples-per-rp", "6"]);
    ok_json(
        dir,
        &["train", "--data", "corpus", "--out", "m.caps", "--epochs", "1", "--filters", "8", "--dim", "4"],
    )
}

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let summary = small_model(dir.path());
    assert_eq!(summary["log"].as_array().unwrap().len(), 1);
    assert_eq!(summary["provenance"]["effective_config"]["filters"], 8);
    assert!(summary["provenance"]["corpus_sha256"].as_str().unwrap().len() == 64);
    let report = ok_json(dir.path(), &["eval", "--data", "corpus", "--model", "m.caps", "--cdf", "cdf.csv"]);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["baselines"][0]["model"], "knn-3");
    assert_eq!(report["config"]["command"], "eval");
    let cdf = std::fs::read_to_string(dir.path().join("cdf.csv")).unwrap();
    assert!(cdf.starts_with("error_m,fraction\n"));
}

#[test]
fn gen_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(dir.path(), &["gen", "--out", "a", "--samples-per-rp", "3", "--seed", "9"]);
    ok_json(dir.path(), &["gen", "--out", "b", "--samples-per-rp", "3", "--seed", "9"]);
    ok_json(dir.path(), &["gen", "--out", "c", "--samples-per-rp", "3", "--seed", "10"]);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("fingerprints.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn config_file_fills_missing_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), r#"{"out": "from-file", "samples_per_rp": 2, "seed": 5}"#).unwrap();
    let v = ok_json(dir.path(), &["gen", "--config", "run.json", "--seed", "6"]);
    let eff = &v["provenance"]["effective_config"];
    assert_eq!(eff["out"], "from-file");
    assert_eq!(eff["samples_per_rp"], 2);
    assert_eq!(eff["seed"], 6);
    assert!(dir.path().join("from-file/fingerprints.jsonl").exists());
}

#[test]
fn failures_are_one_json_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = edgeloc(dir.path(), &["eval", "--data", "missing", "--model", "missing.caps"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    let v: Value = serde_json::from_str(stderr.trim()).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string());

    let out = edgeloc(dir.path(), &["gen", "--out", "x", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn grid_search_prints_a_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(dir.path(), &["gen", "--out", "corpus", "--samples-per-rp", "3"]);
    std::fs::write(dir.path().join("space.json"), r#"{"filters": [4, 8], "channels": [2], "dims": [4]}"#).unwrap();
    let out = edgeloc(
        dir.path(),
        &["grid-search", "--data", "corpus", "--space", "space.json", "--epochs", "1", "--out", "gs.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(table.lines().count(), 3, "{table}");
    let v: Value = serde_json::from_slice(&std::fs::read(dir.path().join("gs.json")).unwrap()).unwrap();
    assert_eq!(v["ranked"].as_array().unwrap().len(), 2);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(dir: &Path, model: &str) -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_edgeloc"))
        .args(["serve", "--model", model, "--bind", "127.0.0.1:0"])
        .current_dir(dir)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut text = String::new();
    // the announcement is a pretty-printed object; read until it closes
    while !text.trim_end().ends_with('}') {
        assert!(reader.read_line(&mut text).unwrap() > 0, "server exited");
    }
    let v: Value = serde_json::from_str(&text).unwrap();
    (Server(child), v["listening"].as_str().unwrap().to_string())
}

#[test]
fn serve_publish_and_locate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_model(d);
    std::fs::write(d.join("s.json"), r#"{"readings": {"AP1": -55.0, "AP2": -70.0, "AP9": -40.0}}"#).unwrap();
    let (server, addr) = serve(d, "m.caps");
    let locate = || ok_json(d, &["locate", "--server", &addr, "--sample", "s.json", "--cache-dir", "cache"]);
    let first = locate();
    assert_eq!(first["bundle_source"], "downloaded");
    assert_eq!(first["ignored_aps"][0], "AP9");
    assert!(first["elapsed_ms"].as_f64().unwrap() >= 0.0);
    let offline = ok_json(d, &["locate", "--model", "m.caps", "--sample", "s.json"]);
    assert_eq!(offline["grid_index"], first["grid_index"]);
    assert_eq!(locate()["bundle_source"], "cache");

    // same version again is refused
    let out = edgeloc(d, &["publish", "--server", &addr, "--model", "m.caps"]);
    assert!(!out.status.success());
    ok_json(
        d,
        &[
            "train", "--data", "corpus", "--out", "m2.caps", "--epochs", "1", "--filters", "8", "--dim", "4",
            "--model-version", "2",
        ],
    );
    ok_json(d, &["publish", "--server", &addr, "--model", "m2.caps"]);
    let updated = locate();
    assert_eq!(updated["bundle_source"], "downloaded");
    assert_eq!(updated["model_version"], 2);

    drop(server);
    let stale = edgeloc(d, &["locate", "--server", &addr, "--sample", "s.json", "--cache-dir", "cache"]);
    assert!(stale.status.success());
    let v: Value = serde_json::from_slice(&stale.stdout).unwrap();
    assert_eq!(v["bundle_source"], "stale-cache");
    assert!(String::from_utf8_lossy(&stale.stderr).contains("stale"));
    let none = edgeloc(d, &["locate", "--server", &addr, "--sample", "s.json", "--cache-dir", "empty"]);
    assert!(!none.status.success());
}

#[test]
fn bench_latency_reports_each_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    small_model(dir.path());
    let v = ok_json(
        dir.path(),
        &["bench-latency", "--data", "corpus", "--model", "m.caps", "--batch-sizes", "5,10", "--repetitions", "2"],
    );
    let r = v["results"].as_array().unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(r[1]["batch_size"], 10);
    assert_eq!(r[0]["per_repetition_ms"].as_array().unwrap().len(), 2);
}
