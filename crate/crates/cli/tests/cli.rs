use std::path::Path;
use std::process::{Command, Output};

fn fslm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fslm"))
        .args(args)
        .current_dir(dir)
        .env_remove("FSLM_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = fslm(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--model", "lgm", "--n", "100", "--seed", "7", "--out", "a.bin"]);
    ok(d, &["--threads", "2", "simulate", "--model", "lgm", "--n", "100", "--seed", "7", "--out", "b.bin"]);
    assert_eq!(read(d, "a.bin"), read(d, "b.bin"));
    assert_eq!(read(d, "a.bin.json"), read(d, "b.bin.json"));
    ok(d, &["simulate", "--model", "lgm", "--n", "100", "--seed", "8", "--out", "c.bin"]);
    assert_ne!(read(d, "a.bin"), read(d, "c.bin"));
}

#[test]
fn env_seed_applies_below_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: Option<&str>, env: &str, out: &str| {
        let mut args = vec!["simulate", "--n", "50", "--out", out];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        let o = Command::new(env!("CARGO_BIN_EXE_fslm")).args(&args).current_dir(d).env("FSLM_SEED", env).output().unwrap();
        assert!(o.status.success());
    };
    run(None, "3", "env.bin");
    run(Some("3"), "99", "flag.bin");
    assert_eq!(read(d, "env.bin"), read(d, "flag.bin"));
}

#[test]
fn missing_obs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = fslm(dir.path(), &["rank", "--model", "m.bin", "--out", "r.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_are_enumerated_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"sampler": {"n": 0, "thin": 0}, "greedy": {"beam": 0}}"#).unwrap();
    let out = fslm(d, &["simulate", "--config", "c.json", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert_eq!(err["violations"].as_array().unwrap().len(), 3, "{err}");
    assert!(!d.join("x.bin").exists());

    std::fs::write(d.join("u.json"), r#"{"sampler": {"samples": 10}}"#).unwrap();
    let out = fslm(d, &["simulate", "--config", "u.json", "--out", "x.bin"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "config");
    assert!(err["error"].as_str().unwrap().contains("samples"));
}

#[test]
fn outputs_are_never_overwritten() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "20", "--out", "a.bin"]);
    let before = read(d, "a.bin");
    let out = fslm(d, &["simulate", "--n", "20", "--seed", "5", "--out", "a.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(read(d, "a.bin"), before);
}

#[test]
fn lgm_rank_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--model", "lgm", "--n", "10000", "--seed", "3", "--out", "data.bin"]);
    ok(d, &["observe", "--model", "lgm", "--seed", "3", "--out", "obs.bin"]);
    ok(d, &["train", "--dataset", "data.bin", "--seed", "3", "--out", "model.bin"]);
    ok(d, &["rank", "--model", "model.bin", "--obs", "obs.bin", "--mode", "fslm", "--n", "500", "--out", "rank.csv", "--plotdata", "plots"]);
    let mut rows = csv::Reader::from_path(d.join("rank.csv")).unwrap();
    let kls: Vec<(String, f64)> =
        rows.records().map(|r| r.unwrap()).map(|r| (r[0].to_string(), r[1].parse().unwrap())).collect();
    assert_eq!(kls.len(), 4);
    let min = kls.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(min.0, "x3", "{kls:?}");
    assert!(d.join("plots/iqr_matrix.csv").exists());

    let post = ok(d, &["posterior", "--model", "model.bin", "--obs", "obs.bin", "--features", "x0,x1,x2", "--n", "200", "--out", "s.bin"]);
    assert!(post.stdout.is_empty());
    let kl = ok(d, &["kl", "--x", "s.bin", "--y", "s.bin"]);
    let est: serde_json::Value = serde_json::from_slice(&kl.stdout).unwrap();
    assert_eq!(est["duplicates_across"], 200);

    let replay = ok(d, &["replay", "--manifest", "rank.csv.manifest.json", "--out-dir", "again"]);
    let summary: serde_json::Value = serde_json::from_slice(&replay.stdout).unwrap();
    assert_eq!(summary["mismatched"].as_array().unwrap().len(), 0);
    assert_eq!(read(d, "rank.csv"), read(d, "again/rank.csv"));
}

#[test]
fn replay_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--n", "30", "--out", "a.bin"]);
    ok(d, &["simulate", "--n", "30", "--seed", "1", "--out", "b.bin"]);
    ok(d, &["kl", "--x", "a.bin", "--y", "b.bin", "--out", "kl.json"]);
    std::fs::write(d.join("b.bin"), read(d, "a.bin")).unwrap();
    let out = fslm(d, &["replay", "--manifest", "kl.json.manifest.json", "--out-dir", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("changed"));
}
