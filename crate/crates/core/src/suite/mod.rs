//! The acceptance battery as a library routine, so the CLI can run it and
//! emit a pass/fail table.

mod checks;
mod directional;

use std::time::Instant;

pub use directional::{
    directional_config, overlap_experiment, retrain_experiment, similarity_pairs, transfer_experiment, OverlapOutcome,
    RetrainComparison, TransferOutcome,
};

use crate::corpus::build_tiered_corpus;
use crate::experiment::{evaluate, ExperimentConfig, ExperimentError, Trainer};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub results: Vec<CriterionResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self, provenance: &str) -> String {
        let mut s = format!("{provenance}\ncriterion,name,passed,seconds,detail\n");
        for r in &self.results {
            s.push_str(&format!("{},{},{},{:.1},\"{}\"\n", r.id, r.name, r.passed, r.seconds, r.detail.replace('"', "'")));
        }
        s
    }
}

/// One-language zero-noise corpus, learned to near-perfect held-out
/// intelligibility. Returns the held-out oracle CER.
pub fn smoke_experiment(seed: u64) -> Result<f64, ExperimentError> {
    let mut c = directional_config(seed).resolve()?;
    c.corpus.noise_scale = 0.0;
    c.corpus.languages.retain(|l| l.id == "en");
    c.corpus.languages[0].samples = 500;
    c.model.languages = vec!["en".into()];
    c.model.speakers = (0..c.corpus.languages[0].speakers).map(|i| format!("en-s{i}")).collect();
    let corpus = build_tiered_corpus(&c.corpus)?;
    let mut schedule = c.schedule.build()?;
    schedule.transitions.clear();
    schedule.adaptation_step = None;
    schedule.lr.horizon = 30_000;
    let mut trainer = Trainer::new(Model::new(c.model.clone())?, &corpus, schedule, c.train_settings())?;
    for _ in 0..3000 {
        trainer.step()?;
    }
    Ok(evaluate(trainer.model(), &corpus, "en", &c.eval_settings())?.cer)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs criteria 1 to 11. A failing or erroring criterion is recorded and
/// the suite continues. `seeds` drive the directional experiments.
pub fn run_suite(config: &ExperimentConfig, seeds: &[u64], mut progress: impl FnMut(&CriterionResult)) -> SuiteReport {
    let seed = config.seed;
    let mut report = SuiteReport::default();
    let mut record = |id, name, f: &mut dyn FnMut() -> Result<String, String>| {
        let t = Instant::now();
        let out = f();
        let r = CriterionResult {
            id,
            name,
            passed: out.is_ok(),
            detail: out.unwrap_or_else(|e| e),
            seconds: t.elapsed().as_secs_f64(),
        };
        progress(&r);
        report.results.push(r);
    };
    record(1, "tokenizer roundtrip", &mut || checks::tokenizer(seed));
    record(2, "sampler distribution", &mut || checks::sampler(seed));
    record(3, "schedule", &mut || checks::schedule());
    record(4, "batcher invariants", &mut || checks::batcher(seed));
    record(5, "model gradients", &mut || checks::gradients(seed));
    record(6, "fastdtw and cer", &mut || checks::dtw(seed));
    record(7, "end-to-end smoke", &mut || {
        let c = smoke_experiment(seed).map_err(|e| e.to_string())?;
        if c <= 0.05 {
            Ok(format!("held-out oracle CER {c:.4}"))
        } else {
            Err(format!("held-out oracle CER {c:.4} > 0.05"))
        }
    });

    let mut transfer = Vec::new();
    let mut overlaps = Vec::new();
    let mut retrains = Vec::new();
    let mut failure = seeds.is_empty().then(|| "no seeds given".to_string());
    for &s in seeds {
        let mut c = directional_config(s);
        c.adapt = config.adapt.clone();
        let run = || -> Result<_, String> {
            let t = transfer_experiment(&c).map_err(|e| e.to_string())?;
            let o = overlap_experiment(&c, &t.adapted, &t.corpus).map_err(|e| e.to_string())?;
            let r = retrain_experiment(&c, &t.adapted, &t.corpus, &o).map_err(|e| e.to_string())?;
            Ok((t, o, r))
        };
        match run() {
            Ok((t, o, r)) => {
                transfer.push([t.multilingual.cer, t.scratch.cer, t.similar.cer]);
                overlaps.push([o.self_mean, o.similar_mean, o.dissimilar_mean, o.random_mean]);
                retrains.push([r.self_pruned.cer, r.self_pruned.dtw_mse, r.dissimilar_pruned.cer, r.dissimilar_pruned.dtw_mse, r.random_pruned.cer, r.random_pruned.dtw_mse]);
            }
            Err(e) => {
                failure = Some(format!("seed {s}: {e}"));
                break;
            }
        }
    }
    let col = |rows: &[[f64; 3]], i: usize| mean(&rows.iter().map(|r| r[i]).collect::<Vec<_>>());
    record(8, "transfer to a new language", &mut || {
        if let Some(e) = &failure {
            return Err(e.clone());
        }
        let (m, a, b) = (col(&transfer, 0), col(&transfer, 1), col(&transfer, 2));
        let detail = format!("mean CER multilingual {m:.4}, scratch {a:.4}, similar-source {b:.4}");
        if m < a && m < b { Ok(detail) } else { Err(detail) }
    });
    record(9, "overlap separation", &mut || {
        if let Some(e) = &failure {
            return Err(e.clone());
        }
        let o = |i: usize| mean(&overlaps.iter().map(|r| r[i]).collect::<Vec<_>>());
        let (se, si, di, ra) = (o(0), o(1), o(2), o(3));
        let detail = format!("self {se:.4}, similar {si:.4}, dissimilar {di:.4}, random {ra:.4}");
        if se - si > 0.03 && si - di > 0.03 && (ra - 0.5).abs() <= 0.02 { Ok(detail) } else { Err(detail) }
    });
    record(10, "prune and retrain", &mut || {
        if let Some(e) = &failure {
            return Err(e.clone());
        }
        let r = |i: usize| mean(&retrains.iter().map(|x| x[i]).collect::<Vec<_>>());
        let (sc, sd, dc, dd, rc, rd) = (r(0), r(1), r(2), r(3), r(4), r(5));
        let detail = format!("CER/DTW-MSE self {sc:.4}/{sd:.4}, dissimilar {dc:.4}/{dd:.4}, random {rc:.4}/{rd:.4}");
        if sc <= dc && sd <= dd && rc >= sc.max(dc) && rd >= sd.max(dd) { Ok(detail) } else { Err(detail) }
    });
    record(11, "saliency exactness", &mut || checks::saliency(seed));
    report
}
