//! Taylor saliency of instrumented neurons, per-language masks, mask
//! overlap, and prune-then-retrain experiments.
//!
//! `Θ(h) = |∂L/∂h · h|` is computed per step, max-pooled over steps and
//! averaged over samples. Masks keep the top `ceil(ratio · width)` neurons of
//! every layer.

mod render;
mod store;

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::corpus::{Corpus, CorpusError, SampleRecord};
use crate::experiment::{evaluate, EvalSettings, ExperimentError, TrainSettings, Trainer};
use crate::metrics::MetricReport;
use crate::model::{LayerInfo, Model, ModelError, SaliencyMask, Utterance};
use crate::schedule::{LrPolicy, TrainingSchedule};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no samples given")]
    NoSamples,
    #[error("samples mix languages {0} and {1}")]
    MixedLanguages(String, String),
    #[error("ratio must be in (0, 1), got {0}")]
    Ratio(f64),
    #[error("layer mismatch: {0}")]
    Shape(String),
    #[error("need at least {0}")]
    TooFew(String),
    #[error("saliency map file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Experiment(#[from] Box<ExperimentError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `|g · h|` at every step and neuron.
pub fn taylor_scores<T: Real>(h: &Tensor<T>, grad: &Tensor<T>) -> Tensor<f64> {
    assert_eq!(h.shape(), grad.shape(), "activation and gradient shapes differ");
    Tensor::from_vec(h.rows, h.cols, h.data.iter().zip(&grad.data).map(|(&a, &g)| (a * g).as_f64().abs()).collect())
}

/// Folds the per-step maxima of `theta` into `acc`.
pub fn max_pool_into(acc: &mut [f64], theta: &Tensor<f64>) {
    for r in 0..theta.rows {
        for (a, &t) in acc.iter_mut().zip(theta.row(r)) {
            if t > *a {
                *a = t;
            }
        }
    }
}

/// SHA-256 of the serialized checkpoint, hex encoded.
pub fn checkpoint_hash<T: Real>(model: &Model<T>) -> String {
    hex::encode(Sha256::digest(model.to_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSaliency {
    pub name: String,
    pub values: Vec<f64>,
    /// Neurons nonzero at some step of some sample.
    pub active: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub language: String,
    pub n_samples: usize,
    pub checkpoint_hash: String,
    pub layers: Vec<LayerSaliency>,
}

impl SaliencyMap {
    pub fn layer(&self, name: &str) -> Option<&LayerSaliency> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Layers with fewer active neurons than a mask at `ratio` keeps, where
    /// overlaps are inflated by never-firing units.
    pub fn sparse_layers(&self, ratio: f64) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| l.active < keep_count(l.values.len(), ratio))
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Sample-weighted mean of maps of one language and checkpoint, e.g.
    /// the two halves of a split.
    pub fn merge(maps: &[&SaliencyMap]) -> Result<SaliencyMap, AnalysisError> {
        let first = maps.first().ok_or(AnalysisError::NoSamples)?;
        for m in &maps[1..] {
            if m.language != first.language {
                return Err(AnalysisError::MixedLanguages(first.language.clone(), m.language.clone()));
            }
            check_same_layers(first, m)?;
            if m.checkpoint_hash != first.checkpoint_hash {
                return Err(AnalysisError::Shape("maps come from different checkpoints".into()));
            }
        }
        let n: usize = maps.iter().map(|m| m.n_samples).sum();
        let layers = first
            .layers
            .iter()
            .enumerate()
            .map(|(li, l)| {
                let mut values = vec![0.0; l.values.len()];
                for m in maps {
                    for (v, x) in values.iter_mut().zip(&m.layers[li].values) {
                        *v += x * m.n_samples as f64;
                    }
                }
                values.iter_mut().for_each(|v| *v /= n as f64);
                LayerSaliency {
                    name: l.name.clone(),
                    values,
                    active: maps.iter().map(|m| m.layers[li].active).max().unwrap_or(0),
                }
            })
            .collect();
        Ok(SaliencyMap { language: first.language.clone(), n_samples: n, checkpoint_hash: first.checkpoint_hash.clone(), layers })
    }
}

fn check_same_layers(a: &SaliencyMap, b: &SaliencyMap) -> Result<(), AnalysisError> {
    let shape = |m: &SaliencyMap| m.layers.iter().map(|l| (l.name.clone(), l.values.len())).collect::<Vec<_>>();
    if shape(a) != shape(b) {
        return Err(AnalysisError::Shape("maps have different layers".into()));
    }
    Ok(())
}

/// Mean over samples of the step-max-pooled Taylor saliency. Samples must
/// share one language; each is evaluated teacher-forced without dropout.
pub fn compute_saliency<T: Real>(model: &Model<T>, samples: &[&SampleRecord]) -> Result<SaliencyMap, AnalysisError> {
    let first = samples.first().ok_or(AnalysisError::NoSamples)?;
    if let Some(r) = samples.iter().find(|r| r.language_id != first.language_id) {
        return Err(AnalysisError::MixedLanguages(first.language_id.clone(), r.language_id.clone()));
    }
    let infos = model.layers();
    let mut sums: Vec<Vec<f64>> = infos.iter().map(|l| vec![0.0; l.width]).collect();
    let mut active: Vec<Vec<bool>> = infos.iter().map(|l| vec![false; l.width]).collect();
    for r in samples {
        let u = Utterance::teacher(r);
        for (acc, s) in sums.iter_mut().zip(model.neuron_saliency(&u)?) {
            acc.iter_mut().zip(s).for_each(|(a, x)| *a += x);
        }
        for (acc, a) in active.iter_mut().zip(model.neuron_activity(&u)?) {
            acc.iter_mut().zip(a).for_each(|(x, y)| *x |= y);
        }
    }
    let n = samples.len() as f64;
    let layers = infos
        .iter()
        .zip(sums)
        .zip(active)
        .map(|((info, s), a)| LayerSaliency {
            name: info.name.clone(),
            values: s.into_iter().map(|v| v / n).collect(),
            active: a.iter().filter(|&&x| x).count(),
        })
        .collect();
    Ok(SaliencyMap {
        language: first.language_id.clone(),
        n_samples: samples.len(),
        checkpoint_hash: checkpoint_hash(model),
        layers,
    })
}

/// `ceil(ratio · width)`.
pub fn keep_count(width: usize, ratio: f64) -> usize {
    ((ratio * width as f64).ceil() as usize).min(width)
}

fn check_ratio(ratio: f64) -> Result<(), AnalysisError> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(AnalysisError::Ratio(ratio))
    }
}

/// Keeps the most salient `ceil(ratio · width)` neurons of every layer;
/// equal saliencies go to the lower index.
pub fn build_mask(map: &SaliencyMap, ratio: f64) -> Result<SaliencyMask, AnalysisError> {
    check_ratio(ratio)?;
    let layers = map
        .layers
        .iter()
        .map(|l| {
            let mut order: Vec<usize> = (0..l.values.len()).collect();
            order.sort_by(|&a, &b| l.values[b].total_cmp(&l.values[a]).then(a.cmp(&b)));
            let mut keep = vec![false; l.values.len()];
            for &i in &order[..keep_count(l.values.len(), ratio)] {
                keep[i] = true;
            }
            (l.name.clone(), keep)
        })
        .collect();
    Ok(SaliencyMask { ratio, layers })
}

/// Uniformly random mask with the same per-layer keep counts as
/// [`build_mask`].
pub fn random_mask(layers: &[LayerInfo], ratio: f64, rng: &mut impl Rng) -> Result<SaliencyMask, AnalysisError> {
    check_ratio(ratio)?;
    let layers = layers
        .iter()
        .map(|l| {
            let mut keep = vec![false; l.width];
            for i in rand::seq::index::sample(rng, l.width, keep_count(l.width, ratio)) {
                keep[i] = true;
            }
            (l.name.clone(), keep)
        })
        .collect();
    Ok(SaliencyMask { ratio, layers })
}

/// Layer-name prefixes; empty selects every layer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerSelector(pub Vec<String>);

impl LayerSelector {
    pub fn all() -> Self {
        Self(Vec::new())
    }

    pub fn matches(&self, layer: &str) -> bool {
        self.0.is_empty() || self.0.iter().any(|p| layer.starts_with(p.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overlap {
    pub layers: BTreeMap<String, f64>,
    pub mean: f64,
}

/// Per layer `|keep(a) ∩ keep(b)| / keep count`, and the unweighted mean
/// over the selected layers.
pub fn overlap(a: &SaliencyMask, b: &SaliencyMask, selector: &LayerSelector) -> Result<Overlap, AnalysisError> {
    if a.layers.len() != b.layers.len() {
        return Err(AnalysisError::Shape(format!("{} vs {} layers", a.layers.len(), b.layers.len())));
    }
    let mut layers = BTreeMap::new();
    for (name, ka) in &a.layers {
        let kb = b.layers.get(name).ok_or_else(|| AnalysisError::Shape(format!("layer {name} missing")))?;
        if ka.len() != kb.len() {
            return Err(AnalysisError::Shape(format!("layer {name}: width {} vs {}", ka.len(), kb.len())));
        }
        if !selector.matches(name) {
            continue;
        }
        let both = ka.iter().zip(kb).filter(|(x, y)| **x && **y).count();
        let kept = ka.iter().filter(|&&x| x).count().max(kb.iter().filter(|&&x| x).count());
        layers.insert(name.clone(), if kept == 0 { 1.0 } else { both as f64 / kept as f64 });
    }
    if layers.is_empty() {
        return Err(AnalysisError::TooFew("one selected layer".into()));
    }
    let mean = layers.values().sum::<f64>() / layers.len() as f64;
    Ok(Overlap { layers, mean })
}

/// Symmetric language-by-language overlap; the diagonal holds split-half
/// self-overlap.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMatrix {
    pub languages: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub ratio: f64,
    pub selector: LayerSelector,
    /// Union of layers flagged by [`SaliencyMap::sparse_layers`].
    pub sparse_layers: Vec<String>,
}

impl OverlapMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.languages.iter().position(|l| l == a)?;
        let j = self.languages.iter().position(|l| l == b)?;
        Some(self.values[i][j])
    }

    pub fn to_csv(&self) -> String {
        render::csv(self)
    }

    pub fn to_svg(&self) -> String {
        render::svg(self)
    }
}

/// Builds the matrix from exactly two maps (split halves) per language.
/// Off-diagonal entries compare masks of the merged halves.
pub fn overlap_matrix_from_maps(
    maps: &[SaliencyMap],
    ratio: f64,
    selector: &LayerSelector,
) -> Result<OverlapMatrix, AnalysisError> {
    let mut groups: Vec<(String, Vec<&SaliencyMap>)> = Vec::new();
    for m in maps {
        match groups.iter_mut().find(|(l, _)| *l == m.language) {
            Some((_, g)) => g.push(m),
            None => groups.push((m.language.clone(), vec![m])),
        }
    }
    if groups.len() < 2 {
        return Err(AnalysisError::TooFew("two languages".into()));
    }
    if let Some((l, g)) = groups.iter().find(|(_, g)| g.len() != 2) {
        return Err(AnalysisError::TooFew(format!("two split-half maps for {l}, got {}", g.len())));
    }
    let mut sparse = std::collections::BTreeSet::new();
    let mut full = Vec::new();
    let mut diag = Vec::new();
    for (_, g) in &groups {
        let merged = SaliencyMap::merge(g)?;
        sparse.extend(merged.sparse_layers(ratio).into_iter().map(String::from));
        full.push(build_mask(&merged, ratio)?);
        diag.push(overlap(&build_mask(g[0], ratio)?, &build_mask(g[1], ratio)?, selector)?.mean);
    }
    let n = groups.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = diag[i];
        for j in i + 1..n {
            let o = overlap(&full[i], &full[j], selector)?.mean;
            values[i][j] = o;
            values[j][i] = o;
        }
    }
    Ok(OverlapMatrix {
        languages: groups.into_iter().map(|(l, _)| l).collect(),
        values,
        ratio,
        selector: selector.clone(),
        sparse_layers: sparse.into_iter().collect(),
    })
}

/// Saliency maps for the two halves of each language's samples.
pub fn split_half_maps<T: Real>(
    model: &Model<T>,
    groups: &[(String, Vec<&SampleRecord>)],
) -> Result<Vec<SaliencyMap>, AnalysisError> {
    let mut maps = Vec::with_capacity(2 * groups.len());
    for (lang, samples) in groups {
        if samples.len() < 2 {
            return Err(AnalysisError::TooFew(format!("two samples of {lang}")));
        }
        let (a, b) = samples.split_at(samples.len() / 2);
        maps.push(compute_saliency(model, a)?);
        maps.push(compute_saliency(model, b)?);
    }
    Ok(maps)
}

pub fn overlap_matrix<T: Real>(
    model: &Model<T>,
    groups: &[(String, Vec<&SampleRecord>)],
    ratio: f64,
    selector: &LayerSelector,
) -> Result<OverlapMatrix, AnalysisError> {
    overlap_matrix_from_maps(&split_half_maps(model, groups)?, ratio, selector)
}

/// How to retrain a pruned model on the target language.
#[derive(Clone, Debug)]
pub struct RetrainSettings {
    pub n_samples: usize,
    pub steps: u64,
    pub lr: LrPolicy,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

/// `(value - base) / base`: the relative increase of an error metric over
/// an unpruned baseline.
pub fn relative_change(value: f64, base: f64) -> f64 {
    if base == 0.0 {
        if value == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        (value - base) / base
    }
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub report: MetricReport,
    /// Mean total training loss over the last tenth of the steps.
    pub final_loss: f64,
    pub model: Model<f32>,
}

/// Applies `mask` permanently, then trains on the first `n_samples` records
/// of `target` alone with a fresh optimizer and evaluates on held-out text.
pub fn prune_and_retrain(
    source: &Model<f32>,
    mask: SaliencyMask,
    corpus: &Corpus,
    target: &str,
    settings: &RetrainSettings,
) -> Result<RetrainOutcome, AnalysisError> {
    let mut model = source.clone();
    model.set_mask(Some(mask))?;
    model.reset_optimizer();
    let mut data = corpus.clone();
    data.truncate_language(target, settings.n_samples)?;
    let schedule =
        TrainingSchedule { initial_language: target.to_string(), transitions: Vec::new(), adaptation_step: None, lr: settings.lr };
    let mut trainer = Trainer::new(model, &data, schedule, settings.train.clone()).map_err(Box::new)?;
    let tail = (settings.steps / 10).max(1);
    let mut tail_loss = 0.0;
    for s in 0..settings.steps {
        let p = trainer.step().map_err(Box::new)?;
        if s + tail >= settings.steps {
            tail_loss += p.loss.total;
        }
    }
    let model = trainer.into_model();
    let report = evaluate(&model, &data, target, &settings.eval).map_err(Box::new)?;
    Ok(RetrainOutcome { report, final_loss: tail_loss / tail as f64, model })
}
