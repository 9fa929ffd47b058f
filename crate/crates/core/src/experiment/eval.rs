use super::ExperimentError;
use crate::corpus::Corpus;
use crate::metrics::{cer, default_unvoiced_threshold, dtw_mse, MetricReport};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub heldout: usize,
    pub heldout_ex: usize,
    pub radius: usize,
    pub unvoiced_threshold: Option<f64>,
}

fn frame_cap(reference_frames: usize) -> usize {
    2 * reference_frames + 10
}

/// Synthesizes held-out texts of `language` autoregressively with each
/// record's own speaker and scores them: oracle CER and DTW-MSE on the
/// standard set, oracle CER on the long-text set.
pub fn evaluate(
    model: &Model<f32>,
    corpus: &Corpus,
    language: &str,
    s: &EvalSettings,
) -> Result<MetricReport, ExperimentError> {
    let oracle = corpus.oracle();
    let held = corpus.held_out(language, s.heldout, 1)?;
    let threshold = s.unvoiced_threshold.unwrap_or_else(|| default_unvoiced_threshold(held.iter().map(|r| &r.frames)));
    let mut cers = Vec::with_capacity(held.len());
    let mut mses = Vec::with_capacity(held.len());
    for r in &held {
        let p = model.synthesize(&r.text, language, &r.speaker_id, frame_cap(r.n_frames()))?;
        cers.push(cer(&oracle.recognize(p.output()), &r.phoneme_ref)?);
        mses.push(dtw_mse(p.output(), &r.frames, threshold, s.radius)?);
    }
    let mut cers_ex = Vec::with_capacity(s.heldout_ex);
    for r in &corpus.held_out(language, s.heldout_ex, 3)? {
        let p = model.synthesize(&r.text, language, &r.speaker_id, frame_cap(r.n_frames()))?;
        cers_ex.push(cer(&oracle.recognize(p.output()), &r.phoneme_ref)?);
    }
    Ok(MetricReport::new(language, cers, cers_ex, mses))
}
