//! Tiered multilingual corpora built from synthetic languages.

mod files;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

pub use files::{read_frames, read_manifest, write_corpus, write_frames, ManifestLine};
pub use synth::{
    corpus_seed, design_script, generate_language, PhonemeInventory, ScriptBlock, Similarity,
    SyntheticLanguageSpec, TextTransform,
};

pub type PhonemeId = u16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus config: {0}")]
    Config(String),
    #[error("duplicate language id {0}")]
    DuplicateLanguage(String),
    #[error("unknown language {0}")]
    UnknownLanguage(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tier {
    T1,
    T2,
    T3,
    Target,
}

impl Tier {
    pub const SOURCES: [Tier; 3] = [Tier::T1, Tier::T2, Tier::T3];
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::T1 => "T1",
            Tier::T2 => "T2",
            Tier::T3 => "T3",
            Tier::Target => "TARGET",
        })
    }
}

impl FromStr for Tier {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T1" => Ok(Tier::T1),
            "T2" => Ok(Tier::T2),
            "T3" => Ok(Tier::T3),
            "TARGET" => Ok(Tier::Target),
            other => Err(CorpusError::Format { what: "tier", detail: other.to_string() }),
        }
    }
}

/// One utterance: text, its frames, and the phonemes a recognizer should hear.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub language_id: String,
    pub speaker_id: String,
    pub text: String,
    /// `T_out x D_mel`, time-major.
    pub frames: Tensor<f32>,
    pub phoneme_ref: Vec<PhonemeId>,
}

impl SampleRecord {
    pub fn n_frames(&self) -> usize {
        self.frames.rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEntry {
    pub id: String,
    pub tier: Tier,
    pub n_samples: usize,
    pub speakers: Vec<String>,
}

/// Language inventory with tiers and a per-language index into the record store.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub languages: Vec<LanguageEntry>,
    /// Indices into [`Corpus::records`] per language.
    pub index: BTreeMap<String, Vec<usize>>,
}

impl CorpusManifest {
    pub fn entry(&self, id: &str) -> Option<&LanguageEntry> {
        self.languages.iter().find(|l| l.id == id)
    }

    pub fn ids_in(&self, tiers: &[Tier]) -> Vec<String> {
        self.languages.iter().filter(|l| tiers.contains(&l.tier)).map(|l| l.id.clone()).collect()
    }

    pub fn samples_of(&self, id: &str) -> &[usize] {
        self.index.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn speakers(&self) -> Vec<String> {
        self.languages.iter().flat_map(|l| l.speakers.iter().cloned()).collect()
    }

    pub fn check(&self) -> Result<(), CorpusError> {
        for l in &self.languages {
            let n = self.samples_of(&l.id).len();
            if n != l.n_samples || n == 0 {
                return Err(CorpusError::Config(format!(
                    "language {} declares {} samples but indexes {n}",
                    l.id, l.n_samples
                )));
            }
        }
        Ok(())
    }
}

/// Manifest, language definitions, and the generated records.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub manifest: CorpusManifest,
    pub specs: Vec<SyntheticLanguageSpec>,
    pub inventory: PhonemeInventory,
    pub records: Vec<SampleRecord>,
}

impl Corpus {
    pub fn spec(&self, id: &str) -> Option<&SyntheticLanguageSpec> {
        self.specs.iter().find(|s| s.id == id)
    }

    pub fn records_of(&self, id: &str) -> Vec<&SampleRecord> {
        self.manifest.samples_of(id).iter().map(|&i| &self.records[i]).collect()
    }

    /// Held-out records drawn from a stream disjoint from training data;
    /// `len_scale` stretches text lengths (3 for the long-text set).
    pub fn held_out(&self, id: &str, n: usize, len_scale: usize) -> Result<Vec<SampleRecord>, CorpusError> {
        let spec = self.spec(id).ok_or_else(|| CorpusError::UnknownLanguage(id.to_string()))?;
        let stream = format!("heldout-x{len_scale}");
        (0..n).map(|i| spec.record_at(self.seed, &stream, i, len_scale)).collect()
    }

    /// Keeps only the first `n` records of `id`.
    pub fn truncate_language(&mut self, id: &str, n: usize) -> Result<(), CorpusError> {
        let idx = self.manifest.index.get_mut(id).ok_or_else(|| CorpusError::UnknownLanguage(id.to_string()))?;
        if n == 0 || n > idx.len() {
            return Err(CorpusError::Config(format!("cannot keep {n} of {} samples of {id}", idx.len())));
        }
        idx.truncate(n);
        if let Some(l) = self.manifest.languages.iter_mut().find(|l| l.id == id) {
            l.n_samples = n;
        }
        Ok(())
    }

    pub fn oracle(&self) -> OracleRecognizer {
        OracleRecognizer::new(self.inventory.signatures.clone())
    }
}

/// How one language in a tiered corpus is designed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub id: String,
    pub tier: Tier,
    pub samples: usize,
    #[serde(default = "default_speakers")]
    pub speakers: usize,
    pub script: ScriptBlock,
    /// Base language for a derived script/g2p table.
    #[serde(default)]
    pub similar_to: Option<String>,
    #[serde(default)]
    pub script_share: f64,
    #[serde(default)]
    pub g2p_share: f64,
    /// Distinct phonemes used by a fresh table; fewer than the script size
    /// gives a many-to-one (opaque) orthography.
    #[serde(default)]
    pub phoneme_classes: Option<usize>,
}

fn default_speakers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub d_mel: usize,
    pub n_phonemes: usize,
    pub min_signature_distance: f64,
    pub duration: usize,
    pub noise_scale: f64,
    pub speaker_offset_scale: f64,
    pub script_size: usize,
    pub text_len_min: usize,
    pub text_len_max: usize,
    pub languages: Vec<LanguageConfig>,
}

impl Default for CorpusConfig {
    /// Two T1 languages with 2000 samples, three T2 with 500, four T3 with
    /// 100 and one target with 500 (subsets of 10/30/100/500 are prefixes).
    fn default() -> Self {
        let lang = |id: &str, tier, samples, speakers, script, sim: Option<(&str, f64, f64)>| LanguageConfig {
            id: id.into(),
            tier,
            samples,
            speakers,
            script,
            similar_to: sim.map(|s| s.0.to_string()),
            script_share: sim.map_or(0.0, |s| s.1),
            g2p_share: sim.map_or(0.0, |s| s.2),
            phoneme_classes: None,
        };
        use ScriptBlock::*;
        use Tier::*;
        Self {
            seed: 0,
            d_mel: 16,
            n_phonemes: 24,
            min_signature_distance: 1.5,
            duration: 1,
            noise_scale: 0.1,
            speaker_offset_scale: 0.1,
            script_size: 16,
            text_len_min: 5,
            text_len_max: 30,
            languages: vec![
                lang("en", T1, 2000, 4, Latin, None),
                lang("ja", T1, 2000, 3, Cjk, None),
                lang("it", T2, 500, 2, Latin, Some(("en", 0.5, 0.25))),
                lang("ru", T2, 500, 2, Cyrillic, None),
                lang("de", T2, 500, 2, Latin, Some(("en", 0.75, 0.75))),
                lang("bg", T3, 100, 1, Cyrillic, Some(("ru", 0.75, 0.75))),
                lang("hi", T3, 100, 1, Devanagari, None),
                lang("vi", T3, 100, 1, LatinAccented, None),
                lang("ko", T3, 100, 1, Hangul, None),
                lang("el", Target, 500, 1, Greek, Some(("it", 0.0, 1.0))),
            ],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.languages.is_empty() {
            return Err(CorpusError::Config("no languages configured".into()));
        }
        let mut seen = HashSet::new();
        for l in &self.languages {
            if !seen.insert(l.id.as_str()) {
                return Err(CorpusError::DuplicateLanguage(l.id.clone()));
            }
            if l.samples == 0 || l.speakers == 0 {
                return Err(CorpusError::Config(format!("language {} needs samples and speakers", l.id)));
            }
            if !(0.0..=1.0).contains(&l.script_share) || !(0.0..=1.0).contains(&l.g2p_share) {
                return Err(CorpusError::Config(format!("language {} shares must be in [0, 1]", l.id)));
            }
        }
        if !self.languages.iter().any(|l| l.tier != Tier::Target) {
            return Err(CorpusError::Config("no source languages configured".into()));
        }
        if self.d_mel == 0 || self.n_phonemes < 2 || self.duration == 0 || self.script_size == 0 {
            return Err(CorpusError::Config("dimensions must be positive".into()));
        }
        if self.text_len_min == 0 || self.text_len_max < self.text_len_min {
            return Err(CorpusError::Config("invalid text length range".into()));
        }
        Ok(())
    }

    /// Language definitions without generating records.
    pub fn design(&self) -> Result<(PhonemeInventory, Vec<SyntheticLanguageSpec>), CorpusError> {
        self.validate()?;
        let inventory = PhonemeInventory::generate(
            self.n_phonemes,
            self.d_mel,
            self.min_signature_distance,
            true,
            self.seed,
        )?;
        let mut specs: Vec<SyntheticLanguageSpec> = Vec::with_capacity(self.languages.len());
        for l in &self.languages {
            let base = match &l.similar_to {
                Some(b) => {
                    let s = specs
                        .iter()
                        .find(|s| &s.id == b)
                        .ok_or_else(|| CorpusError::Config(format!("{} must follow its base {b}", l.id)))?;
                    Some((s.script.clone(), s.g2p.clone()))
                }
                None => None,
            };
            let (script, g2p) = design_script(
                l.script,
                self.script_size,
                self.n_phonemes,
                1,
                l.phoneme_classes,
                base.as_ref().map(|(s, g)| {
                    (s.as_slice(), g.as_slice(), Similarity { script_share: l.script_share, g2p_share: l.g2p_share })
                }),
                self.seed,
                &l.id,
            )?;
            let spec = SyntheticLanguageSpec {
                id: l.id.clone(),
                script,
                g2p,
                duration: self.duration,
                signatures: inventory.signatures.clone(),
                speakers: (0..l.speakers).map(|i| format!("{}-s{i}", l.id)).collect(),
                speaker_offset_scale: self.speaker_offset_scale,
                noise_scale: self.noise_scale,
                text_len: (self.text_len_min, self.text_len_max),
                pre_transform: None,
            };
            spec.validate()?;
            specs.push(spec);
        }
        Ok((inventory, specs))
    }
}

/// Generates every language of `config` into one corpus.
pub fn build_tiered_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let (inventory, specs) = config.design()?;
    let seed = corpus_seed(config.seed);
    let mut records = Vec::new();
    let mut languages = Vec::new();
    let mut index = BTreeMap::new();
    for (l, spec) in config.languages.iter().zip(&specs) {
        let start = records.len();
        for i in 0..l.samples {
            records.push(spec.record_at(seed, "train", i, 1)?);
        }
        index.insert(l.id.clone(), (start..records.len()).collect());
        languages.push(LanguageEntry {
            id: l.id.clone(),
            tier: l.tier,
            n_samples: l.samples,
            speakers: spec.speakers.clone(),
        });
    }
    let manifest = CorpusManifest { languages, index };
    manifest.check()?;
    Ok(Corpus { seed, manifest, specs, inventory, records })
}

/// Nearest-signature frame classifier with run collapsing.
#[derive(Clone, Debug)]
pub struct OracleRecognizer {
    signatures: Vec<Vec<f32>>,
}

impl OracleRecognizer {
    pub fn new(signatures: Vec<Vec<f32>>) -> Self {
        Self { signatures }
    }

    pub fn classify_frame(&self, frame: &[f32]) -> PhonemeId {
        let mut best = (f64::INFINITY, 0);
        for (i, s) in self.signatures.iter().enumerate() {
            let d: f64 = s.iter().zip(frame).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1 as PhonemeId
    }

    pub fn recognize(&self, frames: &Tensor<f32>) -> Vec<PhonemeId> {
        let mut out: Vec<PhonemeId> = Vec::new();
        for r in 0..frames.rows {
            let p = self.classify_frame(frames.row(r));
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        out
    }
}

pub fn oracle_recognize(signatures: &[Vec<f32>], frames: &Tensor<f32>) -> Vec<PhonemeId> {
    OracleRecognizer::new(signatures.to_vec()).recognize(frames)
}
