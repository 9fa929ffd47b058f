//! Desk-scale directional experiments: transfer to a new language, mask
//! overlap structure, and prune-then-retrain.

use std::collections::BTreeSet;

use crate::analysis::{
    build_mask, overlap, overlap_matrix_from_maps, prune_and_retrain, random_mask, split_half_maps, AnalysisError,
    LayerSelector, OverlapMatrix, RetrainSettings, SaliencyMap,
};
use crate::corpus::{Corpus, CorpusConfig, SampleRecord, Tier};
use crate::experiment::{evaluate, prepare, ExperimentConfig, ExperimentError, Trainer};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::schedule::{LrPolicy, ScheduleConfig, SourceStage};

/// Settings under which the directional experiments run in minutes on one
/// core: 1% of the full-scale step counts, a 32-wide model and a slower
/// learning-rate decay so attention alignment forms between resets.
pub fn directional_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
    c.schedule = ScheduleConfig { scale: 0.01, lr0: 2e-3, lr_end: 1e-4, ..ScheduleConfig::adaptation(SourceStage::T3) };
    c.batch.frame_budget = 200;
    let m = &mut c.model;
    m.d_model = 32;
    m.d_ff = 64;
    m.prenet_dim = 32;
    c.metrics.heldout = 20;
    c.metrics.heldout_ex = 10;
    c.metrics.eval_interval = Some(0);
    c.analysis.samples = 40;
    c.analysis.retrain_samples = 100;
    c.analysis.retrain_steps = 1000;
    c.analysis.retrain_lr0 = 2e-3;
    c.analysis.retrain_lr_end = 1e-4;
    c
}

fn train(config: &ExperimentConfig, corpus: &Corpus) -> Result<Model<f32>, ExperimentError> {
    let model = Model::new(config.model.clone())?;
    let mut trainer = Trainer::new(model, corpus, config.schedule.build()?, config.train_settings())?;
    for _ in 0..config.total_steps()? {
        trainer.step()?;
    }
    Ok(trainer.into_model())
}

pub struct TransferOutcome {
    pub target: String,
    /// Tiered multilingual source training, then co-training with the target.
    pub multilingual: MetricReport,
    /// The target alone from scratch.
    pub scratch: MetricReport,
    /// The target co-trained from scratch with its most similar source.
    pub similar: MetricReport,
    pub adapted: Model<f32>,
    /// The corpus with the target at full size, for analysis.
    pub corpus: Corpus,
}

/// Three models with the same step budget and the same `adapt.samples`
/// target records, scored on held-out target text.
pub fn transfer_experiment(config: &ExperimentConfig) -> Result<TransferOutcome, ExperimentError> {
    let target = config.target_language()?;
    let mut full_cfg = config.clone();
    full_cfg.adapt.samples = config.corpus.languages.iter().find(|l| l.id == target).map_or(0, |l| l.samples);
    let full = prepare(full_cfg)?;
    let mut corpus = full.corpus.clone();
    corpus.truncate_language(&target, config.adapt.samples)?;
    let resolved = &full.config;
    let eval = resolved.eval_settings();

    let adapted = train(resolved, &corpus)?;
    let multilingual = evaluate(&adapted, &corpus, &target, &eval)?;

    let mut mono = resolved.clone();
    mono.schedule.initial_language = target.clone();
    mono.schedule.transitions.clear();
    mono.schedule.adaptation_step = None;
    let scratch = evaluate(&train(&mono, &corpus)?, &corpus, &target, &eval)?;

    let base = resolved
        .corpus
        .languages
        .iter()
        .find(|l| l.id == target)
        .and_then(|l| l.similar_to.clone())
        .ok_or_else(|| ExperimentError::Config(format!("{target} has no similar source language")))?;
    let mut sim = mono;
    sim.schedule.initial_language = base;
    sim.schedule.adaptation_step = Some(0);
    let similar = evaluate(&train(&sim, &corpus)?, &corpus, &target, &eval)?;

    Ok(TransferOutcome { target, multilingual, scratch, similar, adapted, corpus: full.corpus })
}

/// Source pairs built as derived variants (both shares at least one half)
/// and, for each, tier-matched partners of unrelated script.
pub fn similarity_pairs(c: &CorpusConfig) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let by_id = |id: &str| c.languages.iter().find(|l| l.id == id);
    let related = |a: &str, b: &str| {
        by_id(a).is_some_and(|l| l.similar_to.as_deref() == Some(b)) || by_id(b).is_some_and(|l| l.similar_to.as_deref() == Some(a))
    };
    let mut similar = Vec::new();
    let mut dissimilar = Vec::new();
    for l in c.languages.iter().filter(|l| l.tier != Tier::Target) {
        let Some(base) = l.similar_to.as_deref().and_then(by_id) else { continue };
        if l.script_share < 0.5 || l.g2p_share < 0.5 || base.tier == Tier::Target {
            continue;
        }
        similar.push((base.id.clone(), l.id.clone()));
        for x in &c.languages {
            if x.tier == l.tier && x.id != l.id && x.script != base.script && !related(&x.id, &base.id) && !related(&x.id, &l.id) {
                dissimilar.push((base.id.clone(), x.id.clone()));
            }
        }
    }
    (similar, dissimilar)
}

pub struct OverlapOutcome {
    pub matrix: OverlapMatrix,
    pub maps: Vec<SaliencyMap>,
    pub self_mean: f64,
    pub similar_mean: f64,
    pub dissimilar_mean: f64,
    /// Mean overlap between independent random masks.
    pub random_mean: f64,
    pub similar_pairs: Vec<(String, String)>,
    pub dissimilar_pairs: Vec<(String, String)>,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Saliency from the last `analysis.samples` records of every language,
/// split in halves for the diagonal.
pub fn overlap_experiment(
    config: &ExperimentConfig,
    model: &Model<f32>,
    corpus: &Corpus,
) -> Result<OverlapOutcome, AnalysisError> {
    let a = &config.analysis;
    let groups: Vec<(String, Vec<&SampleRecord>)> = corpus
        .manifest
        .languages
        .iter()
        .map(|l| {
            let recs = corpus.records_of(&l.id);
            let skip = recs.len().saturating_sub(a.samples);
            (l.id.clone(), recs[skip..].to_vec())
        })
        .collect();
    let selector = LayerSelector(a.layers.clone());
    let maps = split_half_maps(model, &groups)?;
    let matrix = overlap_matrix_from_maps(&maps, a.ratio, &selector)?;
    let (similar_pairs, dissimilar_pairs) = similarity_pairs(&config.corpus);
    let get = |(x, y): &(String, String)| matrix.get(x, y).unwrap_or(f64::NAN);
    let mut rng = crate::rng_for(config.seed, &["random-masks"]);
    let mut random = Vec::new();
    for _ in 0..20 {
        let m1 = random_mask(model.layers(), a.ratio, &mut rng)?;
        let m2 = random_mask(model.layers(), a.ratio, &mut rng)?;
        random.push(overlap(&m1, &m2, &selector)?.mean);
    }
    Ok(OverlapOutcome {
        self_mean: mean((0..matrix.languages.len()).map(|i| matrix.values[i][i])),
        similar_mean: mean(similar_pairs.iter().map(get)),
        dissimilar_mean: mean(dissimilar_pairs.iter().map(get)),
        random_mean: mean(random),
        matrix,
        maps,
        similar_pairs,
        dissimilar_pairs,
    })
}

pub struct RetrainComparison {
    pub target: String,
    /// The model before pruning, as the baseline of relative changes.
    pub unpruned: MetricReport,
    pub self_pruned: MetricReport,
    /// Source language whose mask overlaps least with the target's.
    pub dissimilar_language: String,
    pub dissimilar_pruned: MetricReport,
    pub random_pruned: MetricReport,
}

/// Retrains `model` on `analysis.retrain_samples` target records after
/// pruning with the target's own mask, the least-overlapping source
/// language's mask and a random mask.
pub fn retrain_experiment(
    config: &ExperimentConfig,
    model: &Model<f32>,
    corpus: &Corpus,
    overlaps: &OverlapOutcome,
) -> Result<RetrainComparison, AnalysisError> {
    let a = &config.analysis;
    let target = config.target_language().map_err(Box::new)?;
    let full_map = |lang: &str| -> Result<SaliencyMap, AnalysisError> {
        let halves: Vec<&SaliencyMap> = overlaps.maps.iter().filter(|m| m.language == lang).collect();
        SaliencyMap::merge(&halves)
    };
    let sources: BTreeSet<&str> =
        corpus.manifest.languages.iter().filter(|l| l.tier != Tier::Target).map(|l| l.id.as_str()).collect();
    let dissimilar = sources
        .iter()
        .map(|&l| (l, overlaps.matrix.get(&target, l).unwrap_or(f64::INFINITY)))
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(y.0)))
        .map(|(l, _)| l.to_string())
        .ok_or_else(|| AnalysisError::TooFew("one source language".into()))?;
    let settings = RetrainSettings {
        n_samples: a.retrain_samples,
        steps: a.retrain_steps,
        lr: LrPolicy::new(a.retrain_lr0, a.retrain_lr_end, a.retrain_steps.max(1)).map_err(|e| Box::new(ExperimentError::from(e)))?,
        train: config.train_settings(),
        eval: config.eval_settings(),
    };
    let unpruned = evaluate(model, corpus, &target, &settings.eval).map_err(Box::new)?;
    let run = |mask| prune_and_retrain(model, mask, corpus, &target, &settings).map(|o| o.report);
    let self_pruned = run(build_mask(&full_map(&target)?, a.ratio)?)?;
    let dissimilar_pruned = run(build_mask(&full_map(&dissimilar)?, a.ratio)?)?;
    let mut rng = crate::rng_for(config.seed, &["retrain-random-mask"]);
    let random_pruned = run(random_mask(model.layers(), a.ratio, &mut rng)?)?;
    Ok(RetrainComparison { target, unpruned, self_pruned, dissimilar_language: dissimilar, dissimilar_pruned, random_pruned })
}
