//! Forward graph construction on a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::{Attn, Layout, Lin, Norm};
use super::ModelConfig;
use crate::autodiff::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Sinusoidal position table, `n x d`.
pub(crate) fn sinusoid<T: Real>(n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(n, d, |pos, i| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 / rate;
        T::of(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

pub(crate) struct RecordVars {
    pub mel: Var,
    pub post: Option<Var>,
    pub stop: Var,
    /// `(layer index, activation)` for every instrumented layer.
    pub taps: Vec<(usize, Var)>,
}

pub(crate) struct Graph<'a, T: Real> {
    pub tape: Tape<T>,
    pub params: Vec<Var>,
    cfg: &'a ModelConfig,
    layout: &'a Layout,
    mask_rows: &'a [Option<Tensor<T>>],
    dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Registers every parameter as a trainable leaf (`trainable`) or a
    /// constant.
    pub fn new(
        cfg: &'a ModelConfig,
        layout: &'a Layout,
        params: &[Tensor<T>],
        mask_rows: &'a [Option<Tensor<T>>],
        trainable: bool,
        dropout: Option<&'a mut ChaCha8Rng>,
    ) -> Self {
        let mut tape = Tape::new();
        let params = params
            .iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect();
        Self { tape, params, cfg, layout, mask_rows, dropout }
    }

    fn lin(&mut self, x: Var, l: Lin) -> Var {
        let y = self.tape.matmul(x, self.params[l.w]);
        self.tape.add_row(y, self.params[l.b])
    }

    fn norm(&mut self, x: Var, n: Norm) -> Var {
        self.tape.layer_norm(x, self.params[n.g], self.params[n.b], LN_EPS)
    }

    fn tap(&mut self, h: Var, layer: usize, taps: &mut Vec<(usize, Var)>) -> Var {
        let h = match &self.mask_rows[layer] {
            Some(row) => {
                let m = self.tape.constant(row.clone());
                self.tape.mul_row(h, m)
            }
            None => h,
        };
        taps.push((layer, h));
        h
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.cfg.prenet_dropout;
        let Some(rng) = self.dropout.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let (r, c) = self.tape.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let m = Tensor::from_fn(r, c, |_, _| if rng.gen::<f64>() < p { T::zero() } else { keep });
        let m = self.tape.constant(m);
        self.tape.mul(x, m)
    }

    fn positions(&mut self, x: Var, alpha: usize) -> Var {
        let (n, d) = self.tape.shape(x);
        let pe = self.tape.constant(sinusoid(n, d));
        let pe = self.tape.scale_by(pe, self.params[alpha]);
        self.tape.add(x, pe)
    }

    fn attention(&mut self, xq: Var, xkv: Var, a: Attn, causal: bool) -> Var {
        let q = self.lin(xq, a.q);
        let k = self.lin(xkv, a.k);
        let v = self.lin(xkv, a.v);
        let heads = self.cfg.heads;
        let dh = self.cfg.d_model / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (self.tape.slice_cols(q, s, e), self.tape.slice_cols(k, s, e), self.tape.slice_cols(v, s, e))
            };
            let scores = self.tape.matmul_bt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let p = self.tape.softmax(scores, causal);
            outs.push(self.tape.matmul(p, vh));
        }
        let cat = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs) };
        self.lin(cat, a.o)
    }

    /// Encoder plus conditioning: returns the `n x d_model` memory.
    pub fn encode(&mut self, ids: &[usize], lang: usize, spk: usize, taps: &mut Vec<(usize, Var)>) -> Var {
        let lay = self.layout;
        let n = ids.len();
        let mut x = self.tape.gather(self.params[lay.byte_emb], ids);
        x = self.positions(x, lay.enc_alpha);
        for l in &lay.enc {
            let h = self.norm(x, l.ln1);
            let a = self.attention(h, h, l.attn, false);
            let a = self.tap(a, l.tap_attn, taps);
            x = self.tape.add(x, a);
            let h = self.norm(x, l.ln2);
            let f = self.lin(h, l.ff1);
            let f = self.tape.relu(f);
            let f = self.tap(f, l.tap_hidden, taps);
            let o = self.lin(f, l.ff2);
            let o = self.tap(o, l.tap_out, taps);
            x = self.tape.add(x, o);
        }
        let enc = self.norm(x, lay.enc_norm);

        let le = self.tape.gather(self.params[lay.lang_emb], &[lang]);
        let le = self.lin(le, lay.lang_mlp.0);
        let le = self.tape.relu(le);
        let le = self.tap(le, lay.tap_lang, taps);
        let le = self.lin(le, lay.lang_mlp.1);
        let se = self.tape.gather(self.params[lay.spk_emb], &[spk]);
        let se = self.lin(se, lay.spk_mlp.0);
        let se = self.tape.relu(se);
        let se = self.tap(se, lay.tap_spk, taps);
        let se = self.lin(se, lay.spk_mlp.1);
        let le = self.tape.broadcast_rows(le, n);
        let se = self.tape.broadcast_rows(se, n);
        let cat = self.tape.concat_cols(&[enc, le, se]);
        let mem = self.lin(cat, lay.cond_proj);
        self.tap(mem, lay.tap_cond, taps)
    }

    /// Decoder over `dec_in` (previous frames, go-frame first).
    pub fn decode(&mut self, memory: Var, dec_in: Var, taps: &mut Vec<(usize, Var)>) -> (Var, Option<Var>, Var) {
        let lay = self.layout;
        let p = self.lin(dec_in, lay.prenet.0);
        let p = self.tape.relu(p);
        let p = self.dropout(p);
        let p = self.tap(p, lay.tap_prenet.0, taps);
        let p = self.lin(p, lay.prenet.1);
        let p = self.tape.relu(p);
        let p = self.dropout(p);
        let p = self.tap(p, lay.tap_prenet.1, taps);
        let mut x = self.positions(p, lay.dec_alpha);
        for l in &lay.dec {
            let h = self.norm(x, l.ln1);
            let a = self.attention(h, h, l.self_attn, true);
            let a = self.tap(a, l.tap_self, taps);
            x = self.tape.add(x, a);
            let h = self.norm(x, l.ln2);
            let c = self.attention(h, memory, l.cross_attn, false);
            let c = self.tap(c, l.tap_cross, taps);
            x = self.tape.add(x, c);
            let h = self.norm(x, l.ln3);
            let f = self.lin(h, l.ff1);
            let f = self.tape.relu(f);
            let f = self.tap(f, l.tap_hidden, taps);
            let o = self.lin(f, l.ff2);
            let o = self.tap(o, l.tap_out, taps);
            x = self.tape.add(x, o);
        }
        let x = self.norm(x, lay.dec_norm);
        let mel = self.lin(x, lay.mel_out);
        let stop = self.lin(x, lay.stop_out);
        let post = if lay.postnet.is_empty() {
            None
        } else {
            let mut y = mel;
            let last = lay.postnet.len() - 1;
            for (i, &conv) in lay.postnet.iter().enumerate() {
                let cols = self.tape.im2col(y, self.cfg.postnet_kernel);
                y = self.lin(cols, conv);
                if i < last {
                    y = self.tape.tanh(y);
                    y = self.tap(y, lay.tap_postnet[i], taps);
                }
            }
            Some(self.tape.add(mel, y))
        };
        (mel, post, stop)
    }

    /// Teacher-forced pass over one record.
    pub fn record(&mut self, ids: &[usize], lang: usize, spk: usize, frames: &Tensor<T>) -> RecordVars {
        let mut taps = Vec::new();
        let memory = self.encode(ids, lang, spk, &mut taps);
        let dec_in = self.tape.constant(shift_right(frames));
        let (mel, post, stop) = self.decode(memory, dec_in, &mut taps);
        RecordVars { mel, post, stop, taps }
    }
}

/// Prepends a zero go-frame and drops the last frame.
pub(crate) fn shift_right<T: Real>(frames: &Tensor<T>) -> Tensor<T> {
    let (t, d) = frames.shape();
    let mut out = Tensor::zeros(t, d);
    if t > 1 {
        out.data[d..].copy_from_slice(&frames.data[..(t - 1) * d]);
    }
    out
}
