//! Deterministic synthetic languages.
//!
//! Each language is a script, a grapheme-to-phoneme table into a shared
//! phoneme inventory, and per-phoneme frame signatures. Frames for a text are
//! the signatures of its phonemes, repeated `duration` times, shifted by a
//! per-speaker offset and perturbed by Gaussian noise.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CorpusError, PhonemeId, SampleRecord};
use crate::autodiff::Tensor;
use crate::seed::{derive_seed, rng_for};

/// Unicode ranges used to build scripts, chosen to cover 1-, 2- and 3-byte
/// UTF-8 encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScriptBlock {
    Latin,
    LatinAccented,
    Greek,
    Cyrillic,
    Devanagari,
    Thai,
    Cjk,
    Hangul,
}

impl ScriptBlock {
    pub fn chars(self) -> Vec<char> {
        let range = |a: u32, b: u32| (a..=b).filter_map(char::from_u32).collect::<Vec<_>>();
        match self {
            ScriptBlock::Latin => range('a' as u32, 'z' as u32),
            ScriptBlock::LatinAccented => {
                range(0xE0, 0xFF).into_iter().filter(|&c| c != '\u{F7}').collect()
            }
            ScriptBlock::Greek => range(0x3B1, 0x3C9),
            ScriptBlock::Cyrillic => range(0x430, 0x44F),
            ScriptBlock::Devanagari => range(0x915, 0x939),
            ScriptBlock::Thai => range(0xE01, 0xE2E),
            ScriptBlock::Cjk => range(0x4E00, 0x4E3F),
            ScriptBlock::Hangul => (0..64).filter_map(|i| char::from_u32(0xAC00 + 28 * i)).collect(),
        }
    }

    pub fn utf8_width(self) -> usize {
        self.chars()[0].len_utf8()
    }
}

/// Optional text rewrite applied before a text reaches the model.
#[derive(Clone)]
pub struct TextTransform(pub Arc<dyn Fn(&str) -> String + Send + Sync>);

impl TextTransform {
    pub fn new(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn apply(&self, text: &str) -> String {
        (self.0)(text)
    }
}

impl fmt::Debug for TextTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TextTransform(..)")
    }
}

/// Shared per-phoneme signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeInventory {
    pub signatures: Vec<Vec<f32>>,
}

impl PhonemeInventory {
    /// Draws `n` signatures in `R^d_mel` with pairwise distance at least
    /// `min_distance`. With `silence`, phoneme 0 is the origin.
    pub fn generate(
        n: usize,
        d_mel: usize,
        min_distance: f64,
        silence: bool,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let mut rng = rng_for(seed, &["inventory"]);
        let normal = Normal::new(0.0, 0.7).expect("valid normal");
        let mut signatures: Vec<Vec<f32>> = Vec::with_capacity(n);
        if silence && n > 0 {
            signatures.push(vec![0.0; d_mel]);
        }
        let mut attempts = 0;
        while signatures.len() < n {
            attempts += 1;
            if attempts > 100_000 {
                return Err(CorpusError::Config(format!(
                    "cannot place {n} signatures in {d_mel} dims at distance {min_distance}"
                )));
            }
            let cand: Vec<f32> = (0..d_mel).map(|_| normal.sample(&mut rng) as f32).collect();
            if silence && l2(&cand, &signatures[0]) < 2.0 * min_distance {
                continue;
            }
            if signatures.iter().all(|s| l2(s, &cand) >= min_distance) {
                signatures.push(cand);
            }
        }
        Ok(Self { signatures })
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    pub fn d_mel(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.signatures.len() {
            for j in i + 1..self.signatures.len() {
                best = best.min(l2(&self.signatures[i], &self.signatures[j]));
            }
        }
        best
    }
}

pub(crate) fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
}

/// A fully specified synthetic language.
#[derive(Clone, Debug)]
pub struct SyntheticLanguageSpec {
    pub id: String,
    pub script: Vec<char>,
    /// Phoneme for each grapheme of `script`, same order.
    pub g2p: Vec<PhonemeId>,
    /// Frames per phoneme.
    pub duration: usize,
    pub signatures: Vec<Vec<f32>>,
    pub speakers: Vec<String>,
    /// Expected L2 norm of a speaker offset vector.
    pub speaker_offset_scale: f64,
    /// Expected L2 norm of a per-frame noise vector.
    pub noise_scale: f64,
    /// Inclusive grapheme count range for generated texts.
    pub text_len: (usize, usize),
    pub pre_transform: Option<TextTransform>,
}

impl SyntheticLanguageSpec {
    pub fn d_mel(&self) -> usize {
        self.signatures.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: String| Err(CorpusError::Config(format!("language {}: {m}", self.id)));
        if self.script.is_empty() {
            return err("empty script".into());
        }
        if self.g2p.len() != self.script.len() {
            return err("g2p must map every grapheme".into());
        }
        if let Some(&p) = self.g2p.iter().find(|&&p| p as usize >= self.signatures.len()) {
            return err(format!("phoneme {p} has no signature"));
        }
        if self.duration == 0 {
            return err("duration must be at least 1".into());
        }
        if self.speakers.is_empty() {
            return err("no speakers".into());
        }
        let (lo, hi) = self.text_len;
        if lo == 0 || hi < lo {
            return err(format!("invalid text length range {lo}..={hi}"));
        }
        let mut seen = self.script.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.script.len() {
            return err("duplicate grapheme in script".into());
        }
        let inv = PhonemeInventory { signatures: self.signatures.clone() };
        let min = inv.min_pairwise_distance();
        let required = 4.0 * (self.noise_scale + self.speaker_offset_scale);
        if self.signatures.len() > 1 && min <= required {
            return err(format!("signature separation {min:.3} must exceed {required:.3}"));
        }
        Ok(())
    }

    pub fn phoneme_of(&self, grapheme: char) -> Option<PhonemeId> {
        self.script.iter().position(|&c| c == grapheme).map(|i| self.g2p[i])
    }

    /// Phonemes of `text` with consecutive repeats merged, which is what a
    /// frame-level recognizer can observe.
    pub fn transcribe(&self, text: &str) -> Option<Vec<PhonemeId>> {
        let mut out: Vec<PhonemeId> = Vec::new();
        for c in text.chars() {
            let p = self.phoneme_of(c)?;
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
        Some(out)
    }

    pub fn speaker_offset(&self, seed: u64, speaker: &str) -> Vec<f32> {
        let d = self.d_mel();
        let mut rng = rng_for(seed, &["speaker", speaker]);
        let normal = Normal::new(0.0, self.speaker_offset_scale / (d as f64).sqrt())
            .expect("nonnegative scale");
        (0..d).map(|_| normal.sample(&mut rng) as f32).collect()
    }

    /// Random text of `len_scale` times the configured length range.
    pub fn random_text(&self, rng: &mut impl Rng, len_scale: usize) -> String {
        let (lo, hi) = self.text_len;
        let n = rng.gen_range(lo * len_scale..=hi * len_scale);
        (0..n).map(|_| *self.script.choose(rng).expect("nonempty script")).collect()
    }

    /// Renders frames for `text` (pre-transform graphemes) and a speaker.
    pub fn render(&self, text: &str, offset: &[f32], rng: &mut impl Rng) -> Result<Tensor<f32>, CorpusError> {
        let d = self.d_mel();
        let sigma = self.noise_scale / (d as f64).sqrt();
        let normal = Normal::new(0.0, sigma).expect("nonnegative noise");
        let n_graphemes = text.chars().count();
        let mut frames = Tensor::zeros(n_graphemes * self.duration, d);
        let mut row = 0;
        for c in text.chars() {
            let p = self
                .phoneme_of(c)
                .ok_or_else(|| CorpusError::Config(format!("grapheme {c:?} not in script of {}", self.id)))?;
            let sig = &self.signatures[p as usize];
            for _ in 0..self.duration {
                for (k, o) in frames.row_mut(row).iter_mut().enumerate() {
                    let noise = if sigma > 0.0 { normal.sample(rng) as f32 } else { 0.0 };
                    *o = sig[k] + offset[k] + noise;
                }
                row += 1;
            }
        }
        Ok(frames)
    }

    /// Builds one record from raw graphemes.
    pub fn make_record(
        &self,
        text: &str,
        speaker: &str,
        seed: u64,
        rng: &mut impl Rng,
    ) -> Result<SampleRecord, CorpusError> {
        let offset = self.speaker_offset(seed, speaker);
        let frames = self.render(text, &offset, rng)?;
        let phoneme_ref = self
            .transcribe(text)
            .ok_or_else(|| CorpusError::Config(format!("text outside script of {}", self.id)))?;
        let shown = match &self.pre_transform {
            Some(t) => t.apply(text),
            None => text.to_string(),
        };
        Ok(SampleRecord {
            language_id: self.id.clone(),
            speaker_id: speaker.to_string(),
            text: shown,
            frames,
            phoneme_ref,
        })
    }

    /// The `index`-th record of the stream labelled `stream`; each record has
    /// its own derived seed so records can be produced independently.
    pub fn record_at(
        &self,
        seed: u64,
        stream: &str,
        index: usize,
        len_scale: usize,
    ) -> Result<SampleRecord, CorpusError> {
        let mut rng = rng_for(seed, &["record", &self.id, stream, &index.to_string()]);
        let text = self.random_text(&mut rng, len_scale);
        let speaker = self.speakers[rng.gen_range(0..self.speakers.len())].clone();
        self.make_record(&text, &speaker, seed, &mut rng)
    }
}

/// `n` deterministic training records for `spec`.
pub fn generate_language(
    spec: &SyntheticLanguageSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, CorpusError> {
    if n == 0 {
        return Err(CorpusError::Config("sample count must be at least 1".into()));
    }
    spec.validate()?;
    (0..n).map(|i| spec.record_at(seed, "train", i, 1)).collect()
}

/// How a derived language relates to its base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    /// Fraction of graphemes kept verbatim from the base script.
    pub script_share: f64,
    /// Fraction of grapheme positions whose phoneme matches the base.
    pub g2p_share: f64,
}

/// Builds a language script/g2p table of `size` graphemes from `block`.
///
/// With `base`, position `i` of the new script corresponds to position `i` of
/// the base: the first `script_share * size` positions reuse the base
/// grapheme, the first `g2p_share * size` positions (in an independent
/// order) reuse the base phoneme. `phoneme_classes` limits how many distinct
/// phonemes a fresh table uses, making the mapping many-to-one.
pub fn design_script(
    block: ScriptBlock,
    size: usize,
    n_phonemes: usize,
    first_phoneme: PhonemeId,
    phoneme_classes: Option<usize>,
    base: Option<(&[char], &[PhonemeId], Similarity)>,
    seed: u64,
    label: &str,
) -> Result<(Vec<char>, Vec<PhonemeId>), CorpusError> {
    let mut rng = rng_for(seed, &["design", label]);
    let usable: Vec<PhonemeId> = (first_phoneme as usize..n_phonemes).map(|p| p as PhonemeId).collect();
    if usable.is_empty() {
        return Err(CorpusError::Config("phoneme inventory too small".into()));
    }
    let classes: Vec<PhonemeId> = match phoneme_classes {
        Some(k) => {
            let mut u = usable.clone();
            u.shuffle(&mut rng);
            u.truncate(k.max(1));
            u
        }
        None => usable.clone(),
    };
    let mut fresh_chars: Vec<char> = block.chars();
    fresh_chars.shuffle(&mut rng);

    let mut script = Vec::with_capacity(size);
    let mut g2p = Vec::with_capacity(size);
    match base {
        None => {
            if fresh_chars.len() < size {
                return Err(CorpusError::Config(format!("{block:?} has fewer than {size} graphemes")));
            }
            script.extend_from_slice(&fresh_chars[..size]);
            for i in 0..size {
                // Cycle through a shuffled class list so small tables stay varied.
                if i % classes.len() == 0 {
                    let mut c = classes.clone();
                    c.shuffle(&mut rng);
                    g2p.extend(c);
                }
            }
            g2p.truncate(size);
        }
        Some((base_script, base_g2p, sim)) => {
            if base_script.len() != size {
                return Err(CorpusError::Config("derived language must match base script size".into()));
            }
            let keep_script = (sim.script_share * size as f64).round() as usize;
            let keep_g2p = (sim.g2p_share * size as f64).round() as usize;
            let mut order: Vec<usize> = (0..size).collect();
            order.shuffle(&mut rng);
            let script_kept: Vec<bool> = {
                let mut v = vec![false; size];
                for &i in &order[..keep_script] {
                    v[i] = true;
                }
                v
            };
            order.shuffle(&mut rng);
            let g2p_kept: Vec<bool> = {
                let mut v = vec![false; size];
                for &i in &order[..keep_g2p] {
                    v[i] = true;
                }
                v
            };
            let mut fresh = fresh_chars.into_iter().filter(|c| !base_script.contains(c));
            for i in 0..size {
                let c = if script_kept[i] {
                    base_script[i]
                } else {
                    fresh.next().ok_or_else(|| {
                        CorpusError::Config(format!("{block:?} has too few fresh graphemes"))
                    })?
                };
                script.push(c);
                let p = if g2p_kept[i] {
                    base_g2p[i]
                } else {
                    let alternatives: Vec<PhonemeId> =
                        classes.iter().copied().filter(|&p| p != base_g2p[i]).collect();
                    *alternatives.choose(&mut rng).unwrap_or(&base_g2p[i])
                };
                g2p.push(p);
            }
        }
    }
    Ok((script, g2p))
}

/// Seed used for all records of one corpus.
pub fn corpus_seed(seed: u64) -> u64 {
    derive_seed(seed, &["corpus"])
}
