//! Config-driven training, adaptation and evaluation runs with CSV and
//! checkpoint artifacts.

mod config;
mod eval;
mod run;
mod train;

use thiserror::Error;

pub use config::{
    AdaptConfig, AnalysisConfig, BatchConfig, ExperimentConfig, MetricsConfig, SamplerConfig, TrainConfig, PRESETS,
};
pub use eval::{evaluate, EvalSettings};
pub use run::{
    adaptation_schedule, checkpoint_path, prepare, provenance, run_adapt, run_evaluate, run_train, AdaptRun, Prepared,
    TrainRun,
};
pub use train::{CurvePoint, TrainSettings, Trainer};

use crate::batcher::BatchError;
use crate::corpus::CorpusError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::sampler::SamplerError;
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Whether the failure is a configuration problem caught before compute.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Schedule(_) | Self::Sampler(_))
            || matches!(self, Self::Corpus(CorpusError::Config(_)) | Self::Model(ModelError::Config(_)))
    }
}

#[cfg(test)]
mod tests;
