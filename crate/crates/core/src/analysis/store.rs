//! `B2SS` saliency map files: magic, version, language, sample count,
//! checkpoint hash, then per layer its name, active count and `f64` values.

use std::fs;
use std::path::Path;

use super::{AnalysisError, LayerSaliency, SaliencyMap};

const MAGIC: &[u8; 4] = b"B2SS";
const VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], AnalysisError> {
        if self.0.len() < n {
            return Err(AnalysisError::Format("unexpected end of file".into()));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32, AnalysisError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, AnalysisError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn string(&mut self) -> Result<String, AnalysisError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| AnalysisError::Format("invalid UTF-8".into()))
    }
}

impl SaliencyMap {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.language);
        out.extend_from_slice(&(self.n_samples as u64).to_le_bytes());
        put_str(&mut out, &self.checkpoint_hash);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            put_str(&mut out, &l.name);
            out.extend_from_slice(&(l.active as u32).to_le_bytes());
            out.extend_from_slice(&(l.values.len() as u32).to_le_bytes());
            for v in &l.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, AnalysisError> {
        let mut c = Cursor(buf);
        if c.take(4)? != MAGIC {
            return Err(AnalysisError::Format("missing B2SS magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(AnalysisError::Format(format!("unsupported version {version}")));
        }
        let language = c.string()?;
        let n_samples = c.u64()? as usize;
        let checkpoint_hash = c.string()?;
        let n_layers = c.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let name = c.string()?;
            let active = c.u32()? as usize;
            let width = c.u32()? as usize;
            let values = (0..width)
                .map(|_| c.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || active > width {
                return Err(AnalysisError::Format(format!("layer {name} has invalid values")));
            }
            layers.push(LayerSaliency { name, values, active });
        }
        if !c.0.is_empty() {
            return Err(AnalysisError::Format("trailing bytes".into()));
        }
        Ok(Self { language, n_samples, checkpoint_hash, layers })
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
