use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use b2s_core::experiment::ExperimentConfig;

fn b2s(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_b2s"));
    cmd.args(args).env_remove("B2S_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = ExperimentConfig::default();
    c.output_dir = dir.join("out");
    c.corpus.text_len_min = 3;
    c.corpus.text_len_max = 6;
    c.corpus.d_mel = 4;
    for l in &mut c.corpus.languages {
        l.samples = 12;
        l.speakers = 1;
    }
    c.schedule.scale = 0.0001;
    c.train.steps = Some(6);
    c.train.checkpoint_interval = Some(3);
    c.batch.frame_budget = 24;
    c.metrics.heldout = 2;
    c.metrics.heldout_ex = 1;
    c.adapt.grid = vec![5, 10];
    c.analysis.samples = 4;
    c.analysis.retrain_samples = 4;
    c.analysis.retrain_steps = 2;
    let m = &mut c.model;
    m.enc_layers = 1;
    m.dec_layers = 1;
    m.d_model = 8;
    m.d_ff = 8;
    m.prenet_dim = 4;
    m.postnet_layers = 1;
    m.postnet_channels = 4;
    let path = dir.join("tiny.toml");
    fs::write(&path, c.to_toml()).unwrap();
    path
}

fn checkpoints(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir.join("out/checkpoints")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn tokenize_roundtrip() {
    let o = b2s(&["tokenize", "hé"], &[]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "257,104,195,169,258");
    let o = b2s(&["tokenize", "--decode", "257,104,195,169,258"], &[]);
    assert_eq!(stdout(&o).trim(), "hé");
    assert_eq!(b2s(&["tokenize", "--decode", "300"], &[]).status.code(), Some(2));
}

#[test]
fn sampler_probabilities_sum_to_one() {
    let o = b2s(&["sampler", "probs"], &[]);
    assert!(o.status.success());
    let out = stdout(&o);
    let p: Vec<f64> = out.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(p.len(), 9);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let o = b2s(&["sampler", "probs", "--with-target"], &[]);
    assert!(stdout(&o).contains("el,0.250000000000000"));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "sed = 3\n").unwrap();
    assert_eq!(b2s(&["--config", bad.to_str().unwrap(), "train"], &[]).status.code(), Some(1));
    assert_eq!(b2s(&["--preset", "T9", "train"], &[]).status.code(), Some(1));
    assert_eq!(b2s(&["--config", "/nonexistent.toml", "train"], &[]).status.code(), Some(1));
    assert_eq!(b2s(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(b2s(&["sampler", "probs", "--alpha", "0"], &[]).status.code(), Some(1));
    let cfg = tiny_config(dir.path());
    assert_eq!(b2s(&["--config", cfg.to_str().unwrap(), "train"], &[("B2S_SEED", "x")]).status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = b2s(&["--config", cfg.to_str().unwrap(), "evaluate", "--checkpoint", "/nonexistent.ckpt"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_override_matches_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let o = b2s(&["--config", cfg.to_str().unwrap(), "--output", a.to_str().unwrap(), "train"], &[("B2S_SEED", "3")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&cfg).unwrap().replacen("seed = 0", "seed = 3", 1);
    let cfg3 = dir.path().join("seed3.toml");
    fs::write(&cfg3, text).unwrap();
    let b = dir.path().join("b");
    assert!(b2s(&["--config", cfg3.to_str().unwrap(), "--output", b.to_str().unwrap(), "train"], &[]).status.success());
    let curve = |d: &Path| fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(curve(&a), curve(&b));
    assert!(curve(&a).starts_with("# config_hash="));
    assert!(curve(&a).lines().next().unwrap().ends_with("seed=3"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");

    let o = b2s(&["--config", cfg, "corpus", "generate"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("corpus/manifest.tsv")).unwrap().lines().count(), 120);

    let o = b2s(&["--config", cfg, "train"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cks = checkpoints(dir.path());
    assert_eq!(cks.len(), 2);
    let (mid, last) = (cks[0].to_str().unwrap().to_string(), cks[1].to_str().unwrap().to_string());
    let full_curve = fs::read_to_string(out.join("curve.csv")).unwrap();

    let o = b2s(&["--config", cfg, "train", "--resume", &mid], &[]);
    assert!(o.status.success());
    let resumed = fs::read_to_string(out.join("curve.csv")).unwrap();
    let rows = |s: &str| s.lines().skip(2).map(String::from).collect::<Vec<_>>();
    assert_eq!(rows(&resumed), rows(&full_curve)[3..]);

    let o = b2s(&["--config", cfg, "evaluate", "--checkpoint", &last, "--languages", "en,el"], &[]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);

    assert_eq!(b2s(&["--config", cfg, "adapt", "--source", &mid, "--samples", "7"], &[]).status.code(), Some(1));
    let o = b2s(&["--config", cfg, "adapt", "--source", &mid, "--samples", "5"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("adapt_metrics.csv").exists());

    let o = b2s(&["--config", cfg, "analyze", "saliency", "--checkpoint", &last, "--languages", "en,el"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let maps = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".b2ss")).count();
    assert_eq!(maps, 2);

    let o = b2s(&["--config", cfg, "analyze", "overlap", "--checkpoint", &last], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("overlap.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
    assert_eq!(csv.lines().count(), 12);
    assert!(fs::read_to_string(out.join("overlap.svg")).unwrap().contains("config_hash="));
    assert_eq!(b2s(&["--config", cfg, "analyze", "overlap", "--checkpoint", &last, "--ratio", "1.5"], &[]).status.code(), Some(1));

    for mask in ["el", "random"] {
        let o = b2s(&["--config", cfg, "analyze", "retrain", "--checkpoint", &last, "--mask", mask], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(format!("retrain-{mask}.csv")).exists());
    }
}

#[test]
fn suite_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = b2s(&["--output", dir.path().to_str().unwrap(), "suite", "--seeds"], &[]);
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")).count(), 11);
    assert!(out.contains("overlap separation"));
    let csv = fs::read_to_string(dir.path().join("suite.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
}
