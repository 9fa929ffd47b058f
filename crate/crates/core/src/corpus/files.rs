//! On-disk corpus layout.
//!
//! `manifest.tsv` holds one record per line:
//! `language_id TAB tier TAB speaker_id TAB text TAB frames_path TAB phoneme_ref_csv`,
//! with `frames_path` relative to the manifest. Frame files are a 16-byte
//! header (`B2SF`, version, rows, cols as little-endian u32) followed by
//! little-endian f32 values, time-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use super::{Corpus, CorpusError, PhonemeId, SampleRecord, Tier};
use crate::autodiff::Tensor;

const FRAMES_MAGIC: &[u8; 4] = b"B2SF";
const FRAMES_VERSION: u32 = 1;

pub fn write_frames(path: &Path, frames: &Tensor<f32>) -> Result<(), CorpusError> {
    let mut buf = Vec::with_capacity(16 + 4 * frames.len());
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols as u32).to_le_bytes());
    for v in &frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_frames(path: &Path) -> Result<Tensor<f32>, CorpusError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: String| CorpusError::Format { what: "frames file", detail };
    if bytes.len() < 16 || &bytes[..4] != FRAMES_MAGIC {
        return Err(bad(format!("{} lacks the B2SF header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FRAMES_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(bad(format!("{} has {} payload bytes for {rows}x{cols}", path.display(), bytes.len() - 16)));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

/// One parsed manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestLine {
    pub language_id: String,
    pub tier: Tier,
    pub speaker_id: String,
    pub text: String,
    pub frames_path: PathBuf,
    pub phoneme_ref: Vec<PhonemeId>,
}

impl ManifestLine {
    pub fn to_line(&self) -> String {
        let csv: Vec<String> = self.phoneme_ref.iter().map(|p| p.to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.language_id,
            self.tier,
            self.speaker_id,
            self.text,
            self.frames_path.display(),
            csv.join(",")
        )
    }

    pub fn parse(line: &str) -> Result<Self, CorpusError> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(CorpusError::Format {
                what: "manifest line",
                detail: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let phoneme_ref = if fields[5].is_empty() {
            Vec::new()
        } else {
            fields[5]
                .split(',')
                .map(|p| {
                    p.parse::<PhonemeId>().map_err(|_| CorpusError::Format {
                        what: "phoneme list",
                        detail: p.to_string(),
                    })
                })
                .collect::<Result<_, _>>()?
        };
        Ok(Self {
            language_id: fields[0].to_string(),
            tier: fields[1].parse()?,
            speaker_id: fields[2].to_string(),
            text: fields[3].to_string(),
            frames_path: PathBuf::from(fields[4]),
            phoneme_ref,
        })
    }
}

/// Writes `manifest.tsv` and one frames file per record under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir.join("frames"))?;
    let manifest_path = dir.join("manifest.tsv");
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest_path)?);
    for entry in &corpus.manifest.languages {
        for (k, &i) in corpus.manifest.samples_of(&entry.id).iter().enumerate() {
            let r = &corpus.records[i];
            if r.text.contains(['\t', '\n', '\r']) {
                return Err(CorpusError::Format {
                    what: "record text",
                    detail: "tabs and newlines cannot be stored in the manifest".into(),
                });
            }
            let rel = PathBuf::from("frames").join(format!("{}-{k:05}.b2sf", entry.id));
            write_frames(&dir.join(&rel), &r.frames)?;
            let line = ManifestLine {
                language_id: r.language_id.clone(),
                tier: entry.tier,
                speaker_id: r.speaker_id.clone(),
                text: r.text.clone(),
                frames_path: rel,
                phoneme_ref: r.phoneme_ref.clone(),
            };
            writeln!(out, "{}", line.to_line())?;
        }
    }
    out.flush()?;
    Ok(manifest_path)
}

/// Reads a manifest and the frames it references.
pub fn read_manifest(path: &Path) -> Result<Vec<(ManifestLine, SampleRecord)>, CorpusError> {
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = ManifestLine::parse(&line)?;
        let frames = read_frames(&base.join(&parsed.frames_path))?;
        let record = SampleRecord {
            language_id: parsed.language_id.clone(),
            speaker_id: parsed.speaker_id.clone(),
            text: parsed.text.clone(),
            frames,
            phoneme_ref: parsed.phoneme_ref.clone(),
        };
        out.push((parsed, record));
    }
    Ok(out)
}
