use std::path::Path;

use super::*;
use crate::corpus::Tier;
use crate::model::Model;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.output_dir = dir.to_path_buf();
    c.corpus.text_len_min = 3;
    c.corpus.text_len_max = 6;
    c.corpus.d_mel = 4;
    for l in &mut c.corpus.languages {
        l.samples = 12;
        l.speakers = 1;
    }
    c.schedule.scale = 0.0001;
    c.train.steps = Some(8);
    c.batch.frame_budget = 24;
    c.metrics.heldout = 2;
    c.metrics.heldout_ex = 1;
    c.metrics.eval_interval = Some(0);
    let m = &mut c.model;
    m.enc_layers = 1;
    m.dec_layers = 1;
    m.d_model = 8;
    m.d_ff = 8;
    m.prenet_dim = 4;
    m.postnet_layers = 1;
    m.postnet_channels = 4;
    c
}

#[test]
fn toml_roundtrip() {
    let c = ExperimentConfig::preset("T2").unwrap();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
}

#[test]
fn partial_toml_fills_defaults() {
    let c = ExperimentConfig::from_toml("seed = 9\n[sampler]\nalpha = 0.5\n").unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.sampler.alpha, 0.5);
    assert_eq!(c.sampler.target_probability, 0.25);
    assert_eq!(c.batch, ExperimentConfig::default().batch);
}

#[test]
fn unknown_keys_are_rejected() {
    for text in ["sede = 1\n", "[sampler]\nalfa = 0.2\n", "[corpus]\nnoise = 0.1\n"] {
        let e = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(e.is_config(), "{text}: {e}");
    }
}

#[test]
fn hash_tracks_content() {
    let a = ExperimentConfig::default();
    assert_eq!(a.hash(), ExperimentConfig::default().hash());
    assert_eq!(a.hash().len(), 16);
    let b = ExperimentConfig { seed: 1, ..ExperimentConfig::default() };
    assert_ne!(a.hash(), b.hash());
    let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..ExperimentConfig::default() };
    assert_eq!(a.hash(), moved.hash());
}

#[test]
fn every_preset_resolves() {
    for name in PRESETS {
        ExperimentConfig::preset(name).unwrap().resolve().unwrap();
    }
    assert!(ExperimentConfig::preset("T4").unwrap_err().is_config());
}

#[test]
fn preset_schedules() {
    let s = |n: &str| ExperimentConfig::preset(n).unwrap().schedule.build().unwrap();
    assert_eq!(s("T3D").active_tiers(0).len(), 3);
    assert!(s("source").active_tiers(0).is_empty());
    assert_eq!(ExperimentConfig::preset("mono").unwrap().schedule.initial_language, "el");
    assert_eq!(ExperimentConfig::preset("similar").unwrap().schedule.initial_language, "it");
    assert_eq!(ExperimentConfig::preset("p0.1").unwrap().sampler.target_probability, 0.1);
    let t1 = s("T1");
    assert!(t1.active_tiers(u64::MAX / 2).contains(&Tier::T1));
    assert!(!t1.active_tiers(u64::MAX / 2).contains(&Tier::T2));
}

#[test]
fn resolve_fills_model_tables() {
    let c = ExperimentConfig { seed: 4, ..ExperimentConfig::default() }.resolve().unwrap();
    assert_eq!(c.model.seed, 4);
    assert_eq!(c.corpus.seed, 4);
    assert_eq!(c.model.languages.len(), 10);
    assert_eq!(c.model.speakers.len(), 4 + 3 + 2 * 3 + 4 + 1);
    assert_eq!(c.model.d_mel, c.corpus.d_mel);
}

#[test]
fn invalid_settings_fail_before_compute() {
    let bad: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
        Box::new(|c| c.batch.frame_budget = 10),
        Box::new(|c| c.sampler.alpha = 0.0),
        Box::new(|c| c.sampler.target_probability = 1.0),
        Box::new(|c| c.analysis.ratio = 1.0),
        Box::new(|c| c.metrics.radius = 0),
        Box::new(|c| c.schedule.initial_language = "xx".into()),
        Box::new(|c| c.schedule.scale = -1.0),
        Box::new(|c| c.corpus.languages[0].samples = 0),
        Box::new(|c| c.train.transition_loss = Some(f64::NAN)),
    ];
    for f in bad {
        let mut c = ExperimentConfig::default();
        f(&mut c);
        assert!(prepare(c).err().unwrap().is_config());
    }
}

#[test]
fn prepare_truncates_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.adapt.samples = 5;
    let p = prepare(c).unwrap();
    assert_eq!(p.corpus.records_of("el").len(), 5);
    assert_eq!(p.corpus.records_of("en").len(), 12);
}

#[test]
fn training_writes_artifacts_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(tiny(dir.path())).unwrap();
    let run = run_train(&p, None).unwrap();
    assert_eq!(run.curve.len(), 8);
    assert_eq!(run.model.step(), 8);
    let curve = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), provenance(&p));
    assert_eq!(lines.next().unwrap(), CurvePoint::CSV_HEADER);
    assert_eq!(lines.count(), 8);
    assert!(provenance(&p).contains(&p.hash));
    let last = run.checkpoints.last().unwrap();
    assert_eq!(last, &checkpoint_path(dir.path(), &p, 8));
    assert!(last.to_string_lossy().contains(&p.hash));
    assert!(run.curve.iter().all(|c| c.loss.total.is_finite()));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.checkpoint_interval = Some(4);
    let p = prepare(c).unwrap();
    let full = run_train(&p, None).unwrap();
    let mid: Model<f32> = Model::load(&checkpoint_path(dir.path(), &p, 4)).unwrap();
    let resumed = run_train(&p, Some(mid)).unwrap();
    let rows = |v: &[CurvePoint]| v.iter().map(CurvePoint::csv_row).collect::<Vec<_>>();
    assert_eq!(rows(&resumed.curve), rows(&full.curve[4..]));
    assert_eq!(resumed.model.to_bytes(), full.model.to_bytes());
}

#[test]
fn same_seed_same_run() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_train(&prepare(tiny(d1.path())).unwrap(), None).unwrap();
    let b = run_train(&prepare(tiny(d2.path())).unwrap(), None).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
}

#[test]
fn adaptation_adds_the_target_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.steps = Some(4);
    let source = run_train(&prepare(c.clone()).unwrap(), None).unwrap().model;
    c.train.steps = Some(7);
    let p = prepare(c).unwrap();
    let run = run_adapt(&p, source).unwrap();
    assert_eq!(run.curve.len(), 3);
    assert_eq!(run.metrics.len(), 1);
    assert_eq!(run.metrics[0].0, 7);
    assert!(run.metrics[0].1.cer >= 0.0);
    assert!(dir.path().join("adapt_metrics.csv").exists());
    let s = adaptation_schedule(&p.config, 4).unwrap();
    assert_eq!(s.adaptation_step, Some(4));
}

#[test]
fn adaptation_needs_remaining_steps() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(tiny(dir.path())).unwrap();
    let source = run_train(&p, None).unwrap().model;
    assert!(run_adapt(&p, source).err().unwrap().is_config());
}

#[test]
fn evaluation_writes_one_row_per_language() {
    let dir = tempfile::tempdir().unwrap();
    let p = prepare(tiny(dir.path())).unwrap();
    let model = Model::new(p.config.model.clone()).unwrap();
    let reports = run_evaluate(&p, &model, &["en".into(), "el".into()]).unwrap();
    assert_eq!(reports.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn loss_matched_transition_fires_early() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.transition_loss = Some(1e9);
    let p = prepare(c).unwrap();
    let run = run_train(&p, None).unwrap();
    let tiers: Vec<&str> = run.curve.iter().map(|c| c.tiers.as_str()).collect();
    assert_eq!(&tiers[..4], &["initial", "T1", "T1+T2", "T1+T2+T3"]);
    assert_eq!(run.curve[1].lr, p.config.schedule.lr0);
    let ck = Model::load(&run.checkpoints[0]).unwrap();
    assert!(run_train(&p, Some(ck)).err().unwrap().is_config());
}

#[test]
fn default_frame_budget() {
    assert_eq!(ExperimentConfig::default().batch.frame_budget, 512);
}
