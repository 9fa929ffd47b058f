//! Binary checkpoint: `B2SM`, version, TOML config block, step counter,
//! named tensors (parameters, then Adam moments), optional mask block,
//! dropout RNG state. Integers and floats are little-endian; tensors are
//! stored as 32-bit floats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Model, ModelConfig, ModelError, SaliencyMask};
use crate::autodiff::{Real, Tensor};

const MAGIC: &[u8; 4] = b"B2SM";
const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.u32(t.rows as u32);
        self.u32(t.cols as u32);
        for v in &t.data {
            self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self) -> Result<&'a [u8], ModelError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, ModelError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| ModelError::Checkpoint("name is not UTF-8".into()))
    }
    fn tensor<T: Real>(&mut self) -> Result<(String, Tensor<T>), ModelError> {
        let name = self.string()?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(4 * rows * cols)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Ok((name, Tensor::from_vec(rows, cols, data)))
    }
}

impl<T: Real> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let cfg = toml::to_string(&self.config).expect("config serializes");
        w.bytes(cfg.as_bytes());
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (n, p) in self.names.iter().zip(&self.params) {
            w.tensor(n, p);
        }
        for (n, m) in self.names.iter().zip(&self.adam_m) {
            w.tensor(&format!("adam.m.{n}"), m);
        }
        for (n, v) in self.names.iter().zip(&self.adam_v) {
            w.tensor(&format!("adam.v.{n}"), v);
        }
        match &self.mask {
            None => w.u8(0),
            Some(m) => {
                w.u8(1);
                w.u64(m.ratio.to_bits());
                w.u32(m.layers.len() as u32);
                for (name, keep) in &m.layers {
                    w.bytes(name.as_bytes());
                    let bits: Vec<u8> = keep.iter().map(|&k| k as u8).collect();
                    w.bytes(&bits);
                }
            }
        }
        w.0.extend_from_slice(&self.rng.get_seed());
        w.u64(self.rng.get_stream());
        w.0.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ModelError::Checkpoint("missing B2SM magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg_text = std::str::from_utf8(r.bytes()?).map_err(|_| ModelError::Checkpoint("config block".into()))?;
        let config: ModelConfig =
            toml::from_str(cfg_text).map_err(|e| ModelError::Checkpoint(format!("config block: {e}")))?;
        let mut model = Model::new(config)?;
        model.step = r.u64()?;
        let n = r.u32()? as usize;
        if n != model.params.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {n}", model.params.len())));
        }
        for prefix in ["", "adam.m.", "adam.v."] {
            for i in 0..n {
                let (name, t) = r.tensor::<T>()?;
                let expected = format!("{prefix}{}", model.names[i]);
                if name != expected || t.shape() != model.params[i].shape() {
                    return Err(ModelError::Checkpoint(format!("tensor {name} does not match {expected}")));
                }
                let slot = match prefix {
                    "" => &mut model.params[i],
                    "adam.m." => &mut model.adam_m[i],
                    _ => &mut model.adam_v[i],
                };
                *slot = t;
            }
        }
        let mask = match r.u8()? {
            0 => None,
            1 => {
                let ratio = f64::from_bits(r.u64()?);
                let count = r.u32()? as usize;
                let mut layers = BTreeMap::new();
                for _ in 0..count {
                    let name = r.string()?;
                    let keep = r.bytes()?.iter().map(|&b| b != 0).collect();
                    layers.insert(name, keep);
                }
                Some(SaliencyMask { ratio, layers })
            }
            f => return Err(ModelError::Checkpoint(format!("bad mask flag {f}"))),
        };
        model.set_mask(mask)?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        model.rng = rng;
        if r.pos != buf.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
