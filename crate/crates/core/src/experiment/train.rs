use rand_chacha::ChaCha8Rng;

use super::ExperimentError;
use crate::batcher::Packer;
use crate::corpus::{Corpus, SampleRecord, Tier};
use crate::model::{LossBreakdown, Model, Utterance};
use crate::sampler::{compute_distribution, LanguageSampler};
use crate::schedule::TrainingSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub alpha: f64,
    /// Probability of the target-tier language while it is active alongside
    /// others.
    pub target_probability: Option<f64>,
    pub frame_budget: usize,
    /// Seeds the batch-sampling stream.
    pub seed: u64,
    /// Brings the next tier transition forward once the smoothed training
    /// loss reaches this value.
    pub transition_loss: Option<f64>,
}

/// One row of a training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Active tiers joined by `+`, or `initial` before the first transition.
    pub tiers: String,
}

impl CurvePoint {
    pub const CSV_HEADER: &'static str = "step,lr,frame_loss,postnet_loss,stop_loss,total_loss,tiers";

    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.9e},{:.9},{:.9},{:.9},{:.9},{}",
            self.step, self.lr, l.frame_loss, l.postnet_loss, l.stop_loss, l.total, self.tiers
        )
    }
}

/// Draws records language-first and packs them under the frame budget. The
/// record that overflows a batch opens the next one.
struct BatchStream<'c> {
    corpus: &'c Corpus,
    settings: TrainSettings,
    rng: ChaCha8Rng,
    active: Vec<String>,
    sampler: Option<LanguageSampler>,
    packer: Packer<'c>,
}

impl<'c> BatchStream<'c> {
    fn new(corpus: &'c Corpus, settings: TrainSettings) -> Result<Self, ExperimentError> {
        let rng = crate::rng_for(settings.seed, &["batches"]);
        let packer = Packer::new(settings.frame_budget)?;
        Ok(Self { corpus, settings, rng, active: Vec::new(), sampler: None, packer })
    }

    fn rebuild(&mut self, active: Vec<String>) -> Result<(), ExperimentError> {
        let m = &self.corpus.manifest;
        let counts: Vec<(String, usize)> = active.iter().map(|l| (l.clone(), m.samples_of(l).len())).collect();
        let targets: Vec<&str> = active
            .iter()
            .filter(|l| m.entry(l).is_some_and(|e| e.tier == Tier::Target))
            .map(String::as_str)
            .collect();
        let over = match (targets.as_slice(), self.settings.target_probability) {
            ([t], Some(p)) if active.len() > 1 => Some((*t, p)),
            _ => None,
        };
        let dist = compute_distribution(&counts, self.settings.alpha, over)?;
        self.sampler = Some(LanguageSampler::new(dist, m)?);
        self.active = active;
        Ok(())
    }

    fn next(&mut self, active: Vec<String>) -> Result<Vec<&'c SampleRecord>, ExperimentError> {
        if self.sampler.is_none() || active != self.active {
            self.rebuild(active)?;
        }
        let sampler = self.sampler.as_mut().expect("sampler built");
        loop {
            let (_, idx) = sampler.next(&mut self.rng);
            if let Some(batch) = self.packer.push(&self.corpus.records[idx])? {
                return Ok(batch.records);
            }
        }
    }
}

/// Drives a model through a schedule. The batch stream is a pure function
/// of the settings and the step, so a trainer built around a checkpoint
/// replays the stream up to the checkpoint's step and continues exactly.
pub struct Trainer<'c> {
    model: Model<f32>,
    corpus: &'c Corpus,
    schedule: TrainingSchedule,
    stream: BatchStream<'c>,
    transition_loss: Option<f64>,
    smoothed: Option<f64>,
}

impl<'c> Trainer<'c> {
    pub fn new(
        model: Model<f32>,
        corpus: &'c Corpus,
        schedule: TrainingSchedule,
        settings: TrainSettings,
    ) -> Result<Self, ExperimentError> {
        let transition_loss = settings.transition_loss;
        let mut stream = BatchStream::new(corpus, settings)?;
        for s in 0..model.step() {
            stream.next(schedule.active_languages(&corpus.manifest, s))?;
        }
        Ok(Self { model, corpus, schedule, stream, transition_loss, smoothed: None })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn into_model(self) -> Model<f32> {
        self.model
    }

    pub fn schedule(&self) -> &TrainingSchedule {
        &self.schedule
    }

    pub fn step(&mut self) -> Result<CurvePoint, ExperimentError> {
        let step = self.model.step();
        let active = self.schedule.active_languages(&self.corpus.manifest, step);
        let tiers = self.schedule.active_tiers(step);
        let batch = self.stream.next(active)?;
        let lr = self.schedule.learning_rate(step);
        let utts: Vec<Utterance> = batch.iter().map(|r| Utterance::teacher(r)).collect();
        let loss = self.model.train_step(&utts, lr)?;
        if let Some(threshold) = self.transition_loss {
            let s = self.smoothed.map_or(loss.total, |s| 0.9 * s + 0.1 * loss.total);
            self.smoothed = Some(s);
            let next = self.schedule.transitions.iter().position(|t| t.step > step + 1);
            if let (true, Some(i)) = (s <= threshold, next) {
                self.schedule.trigger_transition(i, step + 1)?;
                self.smoothed = None;
            }
        }
        let tiers = if tiers.is_empty() {
            "initial".to_string()
        } else {
            tiers.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>().join("+")
        };
        Ok(CurvePoint { step, lr, loss, tiers })
    }
}
