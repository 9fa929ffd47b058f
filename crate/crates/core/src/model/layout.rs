//! Parameter inventory: names, shapes, initialization, and the index
//! structure the forward pass uses to find each tensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autodiff::{Real, Tensor};
use crate::tokenizer::VOCAB_SIZE;

/// `x · w + b` with `w` shaped `in x out`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub g: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attn {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
    pub tap_attn: usize,
    pub tap_hidden: usize,
    pub tap_out: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross_attn: Attn,
    pub ln3: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
    pub tap_self: usize,
    pub tap_cross: usize,
    pub tap_hidden: usize,
    pub tap_out: usize,
}

/// An instrumented activation: its name, width, and the parameters that
/// produce it (column `j` of `producer.w` and entry `j` of `producer.b`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub width: usize,
    pub(crate) producer_w: usize,
    pub(crate) producer_b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub byte_emb: usize,
    pub enc_alpha: usize,
    pub enc: Vec<EncLayer>,
    pub enc_norm: Norm,
    pub lang_emb: usize,
    pub spk_emb: usize,
    pub lang_mlp: (Lin, Lin),
    pub spk_mlp: (Lin, Lin),
    pub cond_proj: Lin,
    pub prenet: (Lin, Lin),
    pub dec_alpha: usize,
    pub dec: Vec<DecLayer>,
    pub dec_norm: Norm,
    pub mel_out: Lin,
    pub stop_out: Lin,
    pub postnet: Vec<Lin>,
    pub tap_lang: usize,
    pub tap_spk: usize,
    pub tap_cond: usize,
    pub tap_prenet: (usize, usize),
    pub tap_postnet: Vec<usize>,
    pub layers: Vec<LayerInfo>,
}

pub(crate) struct Builder<'a, T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    layers: Vec<LayerInfo>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), layers: Vec::new(), rng }
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Glorot-uniform weight, zero bias.
    fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Lin {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| T::of(self.rng.gen_range(-a..a)));
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Lin { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        let g = self.push(format!("{name}.g"), Tensor::from_fn(1, d, |_, _| T::one()));
        let b = self.push(format!("{name}.b"), Tensor::zeros(1, d));
        Norm { g, b }
    }

    fn embedding(&mut self, name: &str, rows: usize, d: usize, std: f64) -> usize {
        let a = std * 3f64.sqrt();
        let t = Tensor::from_fn(rows, d, |_, _| T::of(self.rng.gen_range(-a..a)));
        self.push(name.to_string(), t)
    }

    fn scalar(&mut self, name: &str, v: f64) -> usize {
        self.push(name.to_string(), Tensor::scalar(T::of(v)))
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.lin(&format!("{name}.q"), d, d),
            k: self.lin(&format!("{name}.k"), d, d),
            v: self.lin(&format!("{name}.v"), d, d),
            o: self.lin(&format!("{name}.o"), d, d),
        }
    }

    fn tap(&mut self, name: String, width: usize, producer: Lin) -> usize {
        self.layers.push(LayerInfo { name, width, producer_w: producer.w, producer_b: producer.b });
        self.layers.len() - 1
    }

    pub fn build(mut self, c: &ModelConfig) -> (Layout, Vec<String>, Vec<Tensor<T>>) {
        let d = c.d_model;
        let byte_emb = self.embedding("embed.bytes", VOCAB_SIZE, d, 0.3);
        let enc_alpha = self.scalar("encoder.pos_alpha", 1.0);
        let mut enc = Vec::new();
        for l in 0..c.enc_layers {
            let p = format!("encoder.{l}");
            let ln1 = self.norm(&format!("{p}.ln1"), d);
            let attn = self.attn(&format!("{p}.attn"), d);
            let ln2 = self.norm(&format!("{p}.ln2"), d);
            let ff1 = self.lin(&format!("{p}.ff1"), d, c.d_ff);
            let ff2 = self.lin(&format!("{p}.ff2"), c.d_ff, d);
            let tap_attn = self.tap(format!("enc.{l}.attn"), d, attn.o);
            let tap_hidden = self.tap(format!("enc.{l}.ffn.hidden"), c.d_ff, ff1);
            let tap_out = self.tap(format!("enc.{l}.ffn.out"), d, ff2);
            enc.push(EncLayer { ln1, attn, ln2, ff1, ff2, tap_attn, tap_hidden, tap_out });
        }
        let enc_norm = self.norm("encoder.norm", d);

        let (le, se) = (c.lang_embed_dim, c.speaker_embed_dim);
        let lang_emb = self.embedding("embed.language", c.languages.len(), le, 0.5);
        let spk_emb = self.embedding("embed.speaker", c.speakers.len(), se, 0.5);
        let lang_mlp = (self.lin("cond.language.0", le, le), self.lin("cond.language.1", le, le));
        let spk_mlp = (self.lin("cond.speaker.0", se, se), self.lin("cond.speaker.1", se, se));
        let cond_proj = self.lin("cond.proj", d + le + se, d);
        let tap_lang = self.tap("cond.language".into(), le, lang_mlp.0);
        let tap_spk = self.tap("cond.speaker".into(), se, spk_mlp.0);
        let tap_cond = self.tap("cond.proj".into(), d, cond_proj);

        let prenet = (self.lin("decoder.prenet.0", c.d_mel, c.prenet_dim), self.lin("decoder.prenet.1", c.prenet_dim, d));
        let tap_prenet = (
            self.tap("dec.prenet.0".into(), c.prenet_dim, prenet.0),
            self.tap("dec.prenet.1".into(), d, prenet.1),
        );
        let dec_alpha = self.scalar("decoder.pos_alpha", 1.0);
        let mut dec = Vec::new();
        for l in 0..c.dec_layers {
            let p = format!("decoder.{l}");
            let ln1 = self.norm(&format!("{p}.ln1"), d);
            let self_attn = self.attn(&format!("{p}.self_attn"), d);
            let ln2 = self.norm(&format!("{p}.ln2"), d);
            let cross_attn = self.attn(&format!("{p}.cross_attn"), d);
            let ln3 = self.norm(&format!("{p}.ln3"), d);
            let ff1 = self.lin(&format!("{p}.ff1"), d, c.d_ff);
            let ff2 = self.lin(&format!("{p}.ff2"), c.d_ff, d);
            let tap_self = self.tap(format!("dec.{l}.self_attn"), d, self_attn.o);
            let tap_cross = self.tap(format!("dec.{l}.cross_attn"), d, cross_attn.o);
            let tap_hidden = self.tap(format!("dec.{l}.ffn.hidden"), c.d_ff, ff1);
            let tap_out = self.tap(format!("dec.{l}.ffn.out"), d, ff2);
            dec.push(DecLayer {
                ln1,
                self_attn,
                ln2,
                cross_attn,
                ln3,
                ff1,
                ff2,
                tap_self,
                tap_cross,
                tap_hidden,
                tap_out,
            });
        }
        let dec_norm = self.norm("decoder.norm", d);
        let mel_out = self.lin("decoder.mel_out", d, c.d_mel);
        let stop_out = self.lin("decoder.stop_out", d, 1);

        let mut postnet = Vec::new();
        let mut tap_postnet = Vec::new();
        for i in 0..c.postnet_layers {
            let c_in = if i == 0 { c.d_mel } else { c.postnet_channels };
            let c_out = if i + 1 == c.postnet_layers { c.d_mel } else { c.postnet_channels };
            let conv = self.lin(&format!("postnet.{i}"), c.postnet_kernel * c_in, c_out);
            if i + 1 < c.postnet_layers {
                tap_postnet.push(self.tap(format!("postnet.{i}"), c_out, conv));
            }
            postnet.push(conv);
        }

        let layers = std::mem::take(&mut self.layers);
        let layout = Layout {
            byte_emb,
            enc_alpha,
            enc,
            enc_norm,
            lang_emb,
            spk_emb,
            lang_mlp,
            spk_mlp,
            cond_proj,
            prenet,
            dec_alpha,
            dec,
            dec_norm,
            mel_out,
            stop_out,
            postnet,
            tap_lang,
            tap_spk,
            tap_cond,
            tap_prenet,
            tap_postnet,
            layers,
        };
        (layout, self.names, self.tensors)
    }
}
