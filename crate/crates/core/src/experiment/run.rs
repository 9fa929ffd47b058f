use std::fs;
use std::path::{Path, PathBuf};

use super::{evaluate, CurvePoint, EvalSettings, ExperimentConfig, ExperimentError, TrainSettings, Trainer};
use crate::corpus::{build_tiered_corpus, Corpus};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::schedule::{ablation_truncation, TrainingSchedule};

/// A resolved config with its generated corpus.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub hash: String,
}

/// Resolves the config, generates the corpus, applies the schedule's
/// downsampling ablation and cuts the target language to `adapt.samples`.
pub fn prepare(config: ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let config = config.resolve()?;
    let hash = config.hash();
    let mut corpus = build_tiered_corpus(&config.corpus)?;
    for (lang, n) in ablation_truncation(&corpus.manifest, config.schedule.ablation)? {
        corpus.truncate_language(&lang, n)?;
    }
    if let Ok(target) = config.target_language() {
        let have = corpus.manifest.samples_of(&target).len();
        if have > 0 && config.adapt.samples < have {
            corpus.truncate_language(&target, config.adapt.samples)?;
        }
    }
    Ok(Prepared { config, corpus, hash })
}

impl ExperimentConfig {
    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            alpha: self.sampler.alpha,
            target_probability: Some(self.sampler.target_probability),
            frame_budget: self.batch.frame_budget,
            seed: self.seed,
            transition_loss: self.train.transition_loss,
        }
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let m = &self.metrics;
        EvalSettings { heldout: m.heldout, heldout_ex: m.heldout_ex, radius: m.radius, unvoiced_threshold: m.unvoiced_threshold }
    }
}

/// Header line carried by every CSV artifact.
pub fn provenance(p: &Prepared) -> String {
    format!("# config_hash={} seed={}", p.hash, p.config.seed)
}

pub fn checkpoint_path(dir: &Path, p: &Prepared, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("{}-seed{}-step{step:07}.ckpt", p.hash, p.config.seed))
}

fn interval(configured: Option<u64>, start: u64, end: u64) -> u64 {
    match configured {
        Some(0) => u64::MAX,
        Some(n) => n,
        None => ((end - start) / 20).max(1),
    }
}

pub struct TrainRun {
    pub model: Model<f32>,
    pub curve: Vec<CurvePoint>,
    pub checkpoints: Vec<PathBuf>,
}

fn write_curve(path: &Path, p: &Prepared, curve: &[CurvePoint]) -> Result<(), ExperimentError> {
    let mut s = format!("{}\n{}\n", provenance(p), CurvePoint::CSV_HEADER);
    for c in curve {
        s.push_str(&c.csv_row());
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

fn write_metrics(path: &Path, p: &Prepared, rows: &[(u64, MetricReport)]) -> Result<(), ExperimentError> {
    let mut s = format!("{}\nstep,{}\n", provenance(p), MetricReport::CSV_HEADER);
    for (step, r) in rows {
        s.push_str(&format!("{step},{}\n", r.csv_row()));
    }
    Ok(fs::write(path, s)?)
}

fn run_loop(
    p: &Prepared,
    trainer: &mut Trainer,
    end: u64,
    out: &Path,
    mut eval: impl FnMut(u64, &Model<f32>) -> Result<(), ExperimentError>,
) -> Result<(Vec<CurvePoint>, Vec<PathBuf>), ExperimentError> {
    fs::create_dir_all(out.join("checkpoints"))?;
    let start = trainer.model().step();
    let ckpt_every = interval(p.config.train.checkpoint_interval.or(Some(0)), start, end);
    let eval_every = interval(p.config.metrics.eval_interval, start, end);
    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.model().step() < end {
        curve.push(trainer.step()?);
        let done = trainer.model().step();
        if done % ckpt_every == 0 || done == end {
            let path = checkpoint_path(out, p, done);
            trainer.model().save(&path)?;
            checkpoints.push(path);
        }
        if (done - start) % eval_every == 0 || done == end {
            eval(done, trainer.model())?;
        }
    }
    Ok((curve, checkpoints))
}

/// Trains from scratch, or from `resume`, to the configured number of steps.
/// Writes `config.toml`, `curve.csv` and checkpoints under `output_dir`.
pub fn run_train(p: &Prepared, resume: Option<Model<f32>>) -> Result<TrainRun, ExperimentError> {
    let c = &p.config;
    let out = &c.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), format!("{}\n{}", provenance(p), c.to_toml()))?;
    let model = match resume {
        Some(_) if c.train.transition_loss.is_some() => {
            return Err(ExperimentError::Config("runs with train.transition_loss cannot be resumed".into()))
        }
        Some(m) => m,
        None => Model::new(c.model.clone())?,
    };
    let end = c.total_steps()?;
    if model.step() > end {
        return Err(ExperimentError::Config(format!("checkpoint step {} is past the end {end}", model.step())));
    }
    let mut trainer = Trainer::new(model, &p.corpus, c.schedule.build()?, c.train_settings())?;
    let (curve, checkpoints) = run_loop(p, &mut trainer, end, out, |_, _| Ok(()))?;
    write_curve(&out.join("curve.csv"), p, &curve)?;
    Ok(TrainRun { model: trainer.into_model(), curve, checkpoints })
}

pub struct AdaptRun {
    pub model: Model<f32>,
    pub curve: Vec<CurvePoint>,
    pub checkpoints: Vec<PathBuf>,
    /// Held-out target metrics by step.
    pub metrics: Vec<(u64, MetricReport)>,
}

/// The source schedule with the target joining at `start`; later source
/// transitions are dropped so the source set stays that of the checkpoint.
pub fn adaptation_schedule(c: &ExperimentConfig, start: u64) -> Result<TrainingSchedule, ExperimentError> {
    let mut s = c.schedule.build()?;
    s.transitions.retain(|t| t.step <= start);
    s.adaptation_step = Some(start);
    Ok(s)
}

/// Co-trains `source` with the target language (`adapt.samples` records at
/// `sampler.target_probability`) until the configured end, evaluating the
/// target periodically. Writes `adapt_curve.csv` and `adapt_metrics.csv`.
pub fn run_adapt(p: &Prepared, source: Model<f32>) -> Result<AdaptRun, ExperimentError> {
    let c = &p.config;
    let target = c.target_language()?;
    let out = &c.output_dir;
    fs::create_dir_all(out)?;
    let start = source.step();
    let end = c.total_steps()?;
    if end <= start {
        return Err(ExperimentError::Config(format!("source is at step {start}, nothing left before {end}")));
    }
    let schedule = adaptation_schedule(c, start)?;
    let mut trainer = Trainer::new(source, &p.corpus, schedule, c.train_settings())?;
    let eval = c.eval_settings();
    let mut metrics = Vec::new();
    let (curve, checkpoints) = run_loop(p, &mut trainer, end, out, |step, m| {
        metrics.push((step, evaluate(m, &p.corpus, &target, &eval)?));
        Ok(())
    })?;
    write_curve(&out.join("adapt_curve.csv"), p, &curve)?;
    write_metrics(&out.join("adapt_metrics.csv"), p, &metrics)?;
    Ok(AdaptRun { model: trainer.into_model(), curve, checkpoints, metrics })
}

/// Evaluates every listed language and writes `metrics.csv`.
pub fn run_evaluate(p: &Prepared, model: &Model<f32>, languages: &[String]) -> Result<Vec<MetricReport>, ExperimentError> {
    let eval = p.config.eval_settings();
    let reports = languages
        .iter()
        .map(|l| evaluate(model, &p.corpus, l, &eval))
        .collect::<Result<Vec<_>, _>>()?;
    let out = &p.config.output_dir;
    fs::create_dir_all(out)?;
    let mut s = format!("{}\n{}\n", provenance(p), MetricReport::CSV_HEADER);
    for r in &reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    fs::write(out.join("metrics.csv"), s)?;
    Ok(reports)
}
