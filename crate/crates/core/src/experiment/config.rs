use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::corpus::{CorpusConfig, Tier};
use crate::model::ModelConfig;
use crate::schedule::{Ablation, ScheduleConfig, SourceStage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub alpha: f64,
    /// Fixed probability of the target language once it joins.
    pub target_probability: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { alpha: 0.2, target_probability: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    /// Total output frames per batch.
    pub frame_budget: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self { frame_budget: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub heldout: usize,
    /// Long-text held-out set (three times the training length range).
    pub heldout_ex: usize,
    pub radius: usize,
    /// Frame-norm threshold for unvoiced collapse; `None` uses 10% of the
    /// median reference frame norm.
    pub unvoiced_threshold: Option<f64>,
    /// Steps between evaluations; `None` is 5% of the run, 0 evaluates only
    /// at the end.
    pub eval_interval: Option<u64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { heldout: 20, heldout_ex: 10, radius: 1, unvoiced_threshold: None, eval_interval: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total steps; `None` runs to the scaled learning-rate horizon.
    pub steps: Option<u64>,
    /// Steps between checkpoints; `None` or 0 saves only the final one.
    pub checkpoint_interval: Option<u64>,
    /// Smoothed total loss at which the next tier transition fires early,
    /// as in loss-matched ablations. Such runs cannot be resumed.
    pub transition_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Target language; `None` picks the corpus language of the target tier.
    pub target: Option<String>,
    pub samples: usize,
    pub grid: Vec<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { target: None, samples: 10, grid: vec![10, 30, 100, 500] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub ratio: f64,
    /// Samples per language for saliency; split in halves for the diagonal.
    pub samples: usize,
    /// Layer-name prefixes; empty selects all instrumented layers.
    pub layers: Vec<String>,
    pub retrain_samples: usize,
    pub retrain_steps: u64,
    pub retrain_lr0: f64,
    pub retrain_lr_end: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            ratio: 0.5,
            samples: 100,
            layers: Vec::new(),
            retrain_samples: 100,
            retrain_steps: 300,
            retrain_lr0: 1e-3,
            retrain_lr_end: 1e-4,
        }
    }
}

/// Everything one experiment needs. The top-level `seed` drives the corpus,
/// the model initialization and batch sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub batch: BatchConfig,
    pub model: ModelConfig,
    pub metrics: MetricsConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub analysis: AnalysisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch: BatchConfig::default(),
            model: ModelConfig::default(),
            metrics: MetricsConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

pub const PRESETS: &[&str] = &["source", "initial", "T1", "T2", "T3", "T2-", "T3-", "T3D", "p0.1", "mono", "similar"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Named training conditions:
    /// - `source`: tiered source training to the end of the horizon
    /// - `initial`, `T1`, `T2`, `T3`: source training up to that stage, then
    ///   co-training with the target
    /// - `T2-`, `T3-`: downsampled-source ablations; `T3D`: all tiers at once
    /// - `p0.1`: `T3` with target probability 0.1
    /// - `mono`: the target language alone from scratch
    /// - `similar`: the target co-trained with its most similar source only
    pub fn preset(name: &str) -> Result<Self, ExperimentError> {
        let mut c = Self::default();
        match name {
            "source" => {}
            "initial" => c.schedule = ScheduleConfig::adaptation(SourceStage::Initial),
            "T1" => c.schedule = ScheduleConfig::adaptation(SourceStage::T1),
            "T2" => c.schedule = ScheduleConfig::adaptation(SourceStage::T2),
            "T3" => c.schedule = ScheduleConfig::adaptation(SourceStage::T3),
            "T2-" => c.schedule.ablation = Ablation::T2Minus,
            "T3-" => c.schedule.ablation = Ablation::T3Minus,
            "T3D" => c.schedule.ablation = Ablation::T3Direct,
            "p0.1" => {
                c.schedule = ScheduleConfig::adaptation(SourceStage::T3);
                c.sampler.target_probability = 0.1;
            }
            "mono" | "similar" => {
                let target = c.target_language()?;
                let initial = if name == "mono" {
                    target
                } else {
                    let l = c.corpus.languages.iter().find(|l| l.id == target).expect("target exists");
                    l.similar_to.clone().ok_or_else(|| ExperimentError::Config(format!("{target} has no similar source")))?
                };
                c.schedule.initial_language = initial;
                c.schedule.transitions.clear();
                c.schedule.adaptation_step = if name == "similar" { Some(0) } else { None };
            }
            other => return Err(ExperimentError::Config(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        }
        Ok(c)
    }

    pub fn target_language(&self) -> Result<String, ExperimentError> {
        if let Some(t) = &self.adapt.target {
            return Ok(t.clone());
        }
        let targets: Vec<_> = self.corpus.languages.iter().filter(|l| l.tier == Tier::Target).collect();
        match targets.as_slice() {
            [one] => Ok(one.id.clone()),
            _ => Err(ExperimentError::Config("set adapt.target: the corpus needs exactly one target-tier language".into())),
        }
    }

    /// Applies the `B2S_SEED` override and fills derived fields: the seed of
    /// corpus and model, the frame dimension, and the model's language and
    /// speaker tables.
    pub fn resolve(mut self) -> Result<Self, ExperimentError> {
        if let Ok(v) = std::env::var("B2S_SEED") {
            self.seed = v.trim().parse().map_err(|_| ExperimentError::Config(format!("B2S_SEED={v:?} is not an integer")))?;
        }
        self.corpus.seed = self.seed;
        self.model.seed = self.seed;
        self.model.d_mel = self.corpus.d_mel;
        self.model.languages = self.corpus.languages.iter().map(|l| l.id.clone()).collect();
        self.model.speakers = self
            .corpus
            .languages
            .iter()
            .flat_map(|l| (0..l.speakers).map(move |i| format!("{}-s{i}", l.id)))
            .collect();
        self.validate()?;
        Ok(self)
    }

    /// Checks everything that can be checked without generating data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.corpus.validate()?;
        self.schedule.build()?;
        self.model.validate()?;
        let s = &self.sampler;
        if !(s.alpha > 0.0 && s.alpha.is_finite()) {
            return Err(ExperimentError::Config(format!("sampler.alpha must be positive, got {}", s.alpha)));
        }
        if !(s.target_probability > 0.0 && s.target_probability < 1.0) {
            return Err(ExperimentError::Config(format!(
                "sampler.target_probability must be in (0, 1), got {}",
                s.target_probability
            )));
        }
        let longest = self.corpus.text_len_max * self.corpus.duration;
        if self.batch.frame_budget < longest {
            return Err(ExperimentError::Config(format!(
                "batch.frame_budget {} is below the longest record ({longest} frames)",
                self.batch.frame_budget
            )));
        }
        if !self.corpus.languages.iter().any(|l| l.id == self.schedule.initial_language) {
            return Err(ExperimentError::Config(format!(
                "schedule.initial_language {} is not in the corpus",
                self.schedule.initial_language
            )));
        }
        if !(self.analysis.ratio > 0.0 && self.analysis.ratio < 1.0) {
            return Err(ExperimentError::Config(format!("analysis.ratio must be in (0, 1), got {}", self.analysis.ratio)));
        }
        if self.train.transition_loss.is_some_and(|l| !(l.is_finite() && l > 0.0)) {
            return Err(ExperimentError::Config("train.transition_loss must be positive and finite".into()));
        }
        if self.metrics.radius == 0 {
            return Err(ExperimentError::Config("metrics.radius must be at least 1".into()));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the serialized config, output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let c = Self { output_dir: PathBuf::new(), ..self.clone() };
        hex::encode(&Sha256::digest(c.to_toml().as_bytes())[..8])
    }

    /// Steps of a full run: `train.steps` or the scaled horizon.
    pub fn total_steps(&self) -> Result<u64, ExperimentError> {
        Ok(match self.train.steps {
            Some(s) => s,
            None => self.schedule.build()?.lr.horizon,
        })
    }
}
