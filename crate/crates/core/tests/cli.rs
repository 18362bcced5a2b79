use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "seed": 3,
  "network": { "embed_dim": 16, "num_layers": 1, "num_heads": 2, "time_embed_dim": 8 },
  "train": { "steps": 60, "batch_size": 16, "learning_rate": 0.003, "warmup_steps": 10, "precision": "f64" },
  "distill": { "steps": 30, "batch_size": 16, "learning_rate": 0.001, "h_max_doubling": 4, "precision": "f64" },
  "sampler": { "steps": 2 },
  "corpus": { "kind": "toy_modes", "preset": "two_cities" },
  "corpus_size": 500
}"#;

fn flowlm(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_flowlm"));
    cmd.args(args).env_remove("FLM_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowlm(args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest_lines(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn tau_table_prints_header_and_thousand_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let text = ok(&["tau-table", "--vocab", "2", "--out", "-", "--out-dir", d]);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,p_e,tau");
    assert_eq!(lines.len(), 1001);
    let taus: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(taus[0], 0.0);
    assert_eq!(*taus.last().unwrap(), 1.0);
    assert!(taus.windows(2).all(|w| w[1] > w[0]));
    let m = manifest_lines(dir.path());
    assert_eq!(m[0]["subcommand"], "tau-table");
    assert_eq!(m[0]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn factorization_demo_has_four_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    ok(&["demo-factorization", "--samples", "2000", "--flow-steps", "64", "--out", "table.csv", "--out-dir", d]);
    let text = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let one_step: f64 = rows.iter().map(|r| r.split(',').nth(2).unwrap().parse::<f64>().unwrap()).sum();
    assert!((one_step - 1.0).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    assert_eq!(flowlm(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(flowlm(&["tau-table", "--bogus"], &[]).status.code(), Some(2));
    assert_eq!(flowlm(&["no-such-command"], &[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = flowlm(&["sample", "--model", missing.to_str().unwrap(), "--out-dir", d], &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = flowlm(&["tau-table", "--vocab", "4", "--out", "../escape.csv", "--out-dir", d], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().parent().unwrap().join("escape.csv").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = flowlm(&["tau-table", "--vocab", "4", "--out", "t.csv", "--out-dir", d], &[("FLM_SEED", "17")]);
    assert!(out.status.success());
    assert_eq!(manifest_lines(dir.path())[0]["seed"], 17);
    let out = flowlm(&["tau-table", "--vocab", "4", "--out", "t.csv", "--seed", "4", "--out-dir", d], &[("FLM_SEED", "17")]);
    assert!(out.status.success());
    assert_eq!(manifest_lines(dir.path())[1]["seed"], 4);
}

fn pipeline(root: &Path, name: &str) -> std::path::PathBuf {
    let out = root.join(name);
    let cfg = root.join("config.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    ok(&["prepare-data", "--config", c, "--out-dir", o]);
    let corpus = out.join("corpus.txt");
    ok(&["train-flm", "--config", c, "--out-dir", o, "--corpus", corpus.to_str().unwrap()]);
    ok(&["distill-stage1", "--config", c, "--out-dir", o]);
    ok(&["distill-stage2", "--config", c, "--out-dir", o]);
    let model = out.join("flowmap_stage2.ckpt");
    ok(&["sample", "--config", c, "--out-dir", o, "--model", model.to_str().unwrap(), "--count", "300"]);
    let flm = out.join("flm.ckpt");
    ok(&["sample", "--config", c, "--out-dir", o, "--model", flm.to_str().unwrap(), "--count", "100", "--eta", "1.5", "--out", "guided.txt"]);
    let samples = out.join("samples.txt");
    ok(&["eval", "--config", c, "--out-dir", o, "--samples", samples.to_str().unwrap(), "--out", "metrics.jsonl"]);
    out
}

#[test]
fn pipeline_runs_and_reproduces_bit_exactly() {
    let root = tempfile::tempdir().unwrap();
    let a = pipeline(root.path(), "a");
    let b = pipeline(root.path(), "b");
    for f in ["corpus.txt", "flm.ckpt", "flowmap_stage1.ckpt", "flowmap_stage2.ckpt", "samples.txt", "guided.txt", "metrics.jsonl", "train_metrics.jsonl"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    let hash = manifest_lines(&a)[0]["config_hash"].as_str().unwrap().to_string();
    assert!(std::fs::read_to_string(a.join("samples.txt")).unwrap().starts_with(&format!("# config_hash={hash}")));
    let metrics: Vec<serde_json::Value> = std::fs::read_to_string(a.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = metrics.iter().map(|m| m["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"tv_to_truth") && names.contains(&"unigram_entropy"));
    assert!(metrics.iter().all(|m| m["config_hash"] == hash.as_str()));
    let subcommands: Vec<String> = manifest_lines(&a).iter().map(|m| m["subcommand"].as_str().unwrap().to_string()).collect();
    assert_eq!(subcommands, ["prepare-data", "train-flm", "distill-stage1", "distill-stage2", "sample", "sample", "eval"]);
    let mut entries: Vec<String> = std::fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    entries.sort();
    assert_eq!(entries, ["a", "b", "config.json"]);
}
