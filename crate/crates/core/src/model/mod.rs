//! Byte-input encoder-decoder transformer producing frame sequences.
//!
//! Records are processed one at a time at their true lengths and share a
//! single tape, which is equivalent to a padded batch with PAD positions
//! masked out of attention and loss.

mod checkpoint;
mod config;
mod layout;
mod loss;
mod mask;
mod network;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::analysis::{max_pool_into, taylor_scores};
use crate::autodiff::{sigmoid, Gradients, Real, Tensor, Var};
use crate::corpus::SampleRecord;
use crate::tokenizer::{encode, TokenSequence};
pub use config::ModelConfig;
pub use layout::LayerInfo;
use layout::{Builder, Layout};
pub use loss::{loss, LossBreakdown, LossWeights};
pub use mask::SaliencyMask;
use network::{Graph, RecordVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error("unknown speaker {0:?}")]
    UnknownSpeaker(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One input to the model. `frames` enables teacher forcing.
#[derive(Clone, Debug)]
pub struct Utterance<'a> {
    pub tokens: TokenSequence,
    pub language: &'a str,
    pub speaker: &'a str,
    pub frames: Option<&'a Tensor<f32>>,
}

impl<'a> Utterance<'a> {
    pub fn teacher(r: &'a SampleRecord) -> Self {
        Self { tokens: encode(&r.text), language: &r.language_id, speaker: &r.speaker_id, frames: Some(&r.frames) }
    }

    pub fn text(text: &str, language: &'a str, speaker: &'a str) -> Self {
        Self { tokens: encode(text), language, speaker, frames: None }
    }
}

/// Output for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Frames before the post-net, `T x D`.
    pub frames: Tensor<f32>,
    /// Frames after the post-net (equal to `frames` without a post-net).
    pub postnet: Tensor<f32>,
    pub stop_logits: Vec<f32>,
    /// False when decoding hit `max_frames` before the stop token fired.
    pub terminated: bool,
}

impl Prediction {
    /// The frames used for evaluation.
    pub fn output(&self) -> &Tensor<f32> {
        &self.postnet
    }
}

/// Loss and gradients for every parameter, in [`Model::params`] order.
pub struct Backprop<T> {
    pub loss: LossBreakdown,
    pub param_grads: Vec<Tensor<T>>,
}

struct Prepared<T> {
    ids: Vec<usize>,
    lang: usize,
    spk: usize,
    frames: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    adam_m: Vec<Tensor<T>>,
    adam_v: Vec<Tensor<T>>,
    step: u64,
    mask: Option<SaliencyMask>,
    mask_rows: Vec<Option<Tensor<T>>>,
    rng: ChaCha8Rng,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut init_rng = crate::rng_for(config.seed, &["model", "init"]);
        let (layout, names, params) = Builder::new(&mut init_rng).build(&config);
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
        let mask_rows = vec![None; layout.layers.len()];
        let rng = crate::rng_for(config.seed, &["model", "dropout"]);
        Ok(Self {
            config,
            layout,
            names,
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
            mask: None,
            mask_rows,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Zeroes the Adam moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        for t in self.adam_m.iter_mut().chain(self.adam_v.iter_mut()) {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        self.step = 0;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index(name).map(|i| &self.params[i])
    }

    /// Direct parameter access. Does not re-apply an active mask.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_index(name).map(move |i| &mut self.params[i])
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Instrumented activations in a fixed order.
    pub fn layers(&self) -> &[LayerInfo] {
        &self.layout.layers
    }

    pub fn mask(&self) -> Option<&SaliencyMask> {
        self.mask.as_ref()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            frame: self.config.frame_loss_weight,
            postnet: self.config.postnet_loss_weight,
            stop: self.config.stop_loss_weight,
        }
    }

    pub fn set_loss_weights(&mut self, w: LossWeights) -> Result<(), ModelError> {
        let mut c = self.config.clone();
        c.frame_loss_weight = w.frame;
        c.postnet_loss_weight = w.postnet;
        c.stop_loss_weight = w.stop;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    /// Activates (or clears) a neuron mask. Masked activations are zeroed in
    /// every forward pass and their producing weights are zeroed now and
    /// after every update.
    pub fn set_mask(&mut self, mask: Option<SaliencyMask>) -> Result<(), ModelError> {
        let mut rows = vec![None; self.layout.layers.len()];
        if let Some(m) = &mask {
            for name in m.layers.keys() {
                if !self.layout.layers.iter().any(|l| &l.name == name) {
                    return Err(ModelError::Mask(format!("unknown layer {name}")));
                }
            }
            for (i, info) in self.layout.layers.iter().enumerate() {
                if let Some(keep) = m.layers.get(&info.name) {
                    if keep.len() != info.width {
                        return Err(ModelError::Mask(format!(
                            "layer {} has width {}, mask has {}",
                            info.name,
                            info.width,
                            keep.len()
                        )));
                    }
                    rows[i] = Some(Tensor::from_vec(
                        1,
                        keep.len(),
                        keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect(),
                    ));
                }
            }
        }
        self.mask = mask;
        self.mask_rows = rows;
        self.apply_mask_to_params();
        Ok(())
    }

    fn apply_mask_to_params(&mut self) {
        for (info, row) in self.layout.layers.iter().zip(&self.mask_rows) {
            let Some(row) = row else { continue };
            for (j, &k) in row.data.iter().enumerate() {
                if k != T::zero() {
                    continue;
                }
                let w = &mut self.params[info.producer_w];
                for r in 0..w.rows {
                    w.set(r, j, T::zero());
                }
                self.params[info.producer_b].data[j] = T::zero();
            }
        }
    }

    fn prepare(&self, u: &Utterance) -> Result<Prepared<T>, ModelError> {
        let lang = self.config.language_index(u.language)?;
        let spk = self.config.speaker_index(u.speaker)?;
        let frames = match u.frames {
            Some(f) => {
                if f.cols != self.config.d_mel || f.rows == 0 {
                    return Err(ModelError::Shape(format!(
                        "teacher frames are {}x{}, expected Tx{} with T >= 1",
                        f.rows, f.cols, self.config.d_mel
                    )));
                }
                if !f.all_finite() {
                    return Err(ModelError::NonFinite("teacher frames".into()));
                }
                Some(f.cast())
            }
            None => None,
        };
        Ok(Prepared { ids: u.tokens.indices(), lang, spk, frames })
    }

    fn prepare_teacher(&self, batch: &[Utterance]) -> Result<Vec<Prepared<T>>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        batch
            .iter()
            .map(|u| {
                let p = self.prepare(u)?;
                if p.frames.is_none() {
                    return Err(ModelError::Shape("teacher frames required".into()));
                }
                Ok(p)
            })
            .collect()
    }

    /// Builds the batch graph and its total loss node.
    fn build<'a>(
        &'a self,
        prepared: &[Prepared<T>],
        trainable: bool,
        dropout: Option<&'a mut ChaCha8Rng>,
    ) -> (Graph<'a, T>, Vec<RecordVars>, LossVars) {
        let mut g = Graph::new(&self.config, &self.layout, &self.params, &self.mask_rows, trainable, dropout);
        let mut recs = Vec::with_capacity(prepared.len());
        let (mut frame_sse, mut post_sse, mut bce) = (Vec::new(), Vec::new(), Vec::new());
        let mut n_frames = 0;
        for p in prepared {
            let frames = p.frames.as_ref().expect("teacher frames");
            let r = g.record(&p.ids, p.lang, p.spk, frames);
            let target = g.tape.constant(frames.clone());
            frame_sse.push(g.tape.squared_error(r.mel, target));
            if let Some(post) = r.post {
                post_sse.push(g.tape.squared_error(post, target));
            }
            let mut stop_t = Tensor::zeros(frames.rows, 1);
            stop_t.data[frames.rows - 1] = T::one();
            let stop_t = g.tape.constant(stop_t);
            bce.push(g.tape.bce_logits(r.stop, stop_t));
            n_frames += frames.rows;
            recs.push(r);
        }
        let d = self.config.d_mel;
        let w = self.loss_weights();
        let sum_scaled = |g: &mut Graph<T>, parts: &[Var], k: f64| -> Var {
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = g.tape.add(acc, p);
            }
            g.tape.scale(acc, T::of(k))
        };
        let frame = sum_scaled(&mut g, &frame_sse, 1.0 / (n_frames * d) as f64);
        let post = if post_sse.is_empty() { None } else { Some(sum_scaled(&mut g, &post_sse, 1.0 / (n_frames * d) as f64)) };
        let stop = sum_scaled(&mut g, &bce, 1.0 / n_frames as f64);
        let mut total = g.tape.scale(frame, T::of(w.frame));
        if let Some(p) = post {
            let p = g.tape.scale(p, T::of(w.postnet));
            total = g.tape.add(total, p);
        }
        let s = g.tape.scale(stop, T::of(w.stop));
        total = g.tape.add(total, s);
        (g, recs, LossVars { frame, post, stop, total })
    }

    fn breakdown(g: &Graph<T>, lv: &LossVars) -> Result<LossBreakdown, ModelError> {
        let v = |x: Var| g.tape.value(x).data[0].as_f64();
        let b = LossBreakdown {
            frame_loss: v(lv.frame),
            postnet_loss: lv.post.map(v).unwrap_or(0.0),
            stop_loss: v(lv.stop),
            total: v(lv.total),
        };
        if !b.total.is_finite() {
            return Err(ModelError::NonFinite("total loss".into()));
        }
        Ok(b)
    }

    /// Teacher-forced loss without dropout.
    pub fn evaluate_loss(&self, batch: &[Utterance]) -> Result<LossBreakdown, ModelError> {
        let prepared = self.prepare_teacher(batch)?;
        let (g, _, lv) = self.build(&prepared, false, None);
        Self::breakdown(&g, &lv)
    }

    /// Exact gradients of the total teacher-forced loss, dropout disabled.
    pub fn gradients(&self, batch: &[Utterance]) -> Result<Backprop<T>, ModelError> {
        let prepared = self.prepare_teacher(batch)?;
        let (g, _, lv) = self.build(&prepared, true, None);
        let loss = Self::breakdown(&g, &lv)?;
        let mut grads = g.tape.backward(lv.total);
        Ok(Backprop { loss, param_grads: self.collect_grads(&g, &mut grads) })
    }

    fn collect_grads(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        g.params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.rows, p.cols)))
            .collect()
    }

    /// Per instrumented layer and neuron: `max_t |∂L/∂h_t · h_t|` for the
    /// teacher-forced loss of this single utterance, dropout disabled.
    pub fn neuron_saliency(&self, u: &Utterance) -> Result<Vec<Vec<f64>>, ModelError> {
        let prepared = self.prepare_teacher(std::slice::from_ref(u))?;
        let (g, recs, lv) = self.build(&prepared, true, None);
        Self::breakdown(&g, &lv)?;
        let grads = g.tape.backward(lv.total);
        let mut out: Vec<Vec<f64>> = self.layout.layers.iter().map(|l| vec![0.0; l.width]).collect();
        for &(layer, h) in &recs[0].taps {
            let Some(gv) = grads.get(h) else { continue };
            max_pool_into(&mut out[layer], &taylor_scores(g.tape.value(h), gv));
        }
        Ok(out)
    }

    /// Whether each instrumented neuron is nonzero at any step for this
    /// utterance (teacher-forced, no dropout).
    pub fn neuron_activity(&self, u: &Utterance) -> Result<Vec<Vec<bool>>, ModelError> {
        let prepared = self.prepare_teacher(std::slice::from_ref(u))?;
        let (g, recs, _) = self.build(&prepared, false, None);
        let mut out: Vec<Vec<bool>> = self.layout.layers.iter().map(|l| vec![false; l.width]).collect();
        for &(layer, h) in &recs[0].taps {
            let hv = g.tape.value(h);
            for r in 0..hv.rows {
                for (c, a) in out[layer].iter_mut().enumerate() {
                    *a |= hv.at(r, c) != T::zero();
                }
            }
        }
        Ok(out)
    }

    /// One Adam step with prenet dropout active.
    pub fn train_step(&mut self, batch: &[Utterance], lr: f64) -> Result<LossBreakdown, ModelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ModelError::Config(format!("learning rate must be positive, got {lr}")));
        }
        let prepared = self.prepare_teacher(batch)?;
        let mut rng = self.rng.clone();
        let (loss, grads) = {
            let (g, _, lv) = self.build(&prepared, true, Some(&mut rng));
            let loss = Self::breakdown(&g, &lv)?;
            let mut grads = g.tape.backward(lv.total);
            (loss, self.collect_grads(&g, &mut grads))
        };
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(ModelError::NonFinite("gradients".into()));
        }
        self.rng = rng;
        self.step += 1;
        let c = &self.config;
        let (b1, b2, eps) = (c.adam_beta1, c.adam_beta2, c.adam_eps);
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t, epst) = (T::of(b1), T::of(b2), T::of(eps));
        let step_size = T::of(lr * bc2.sqrt() / bc1);
        let eps_hat = epst * T::of(bc2.sqrt());
        for ((p, g), (m, v)) in self.params.iter_mut().zip(&grads).zip(self.adam_m.iter_mut().zip(self.adam_v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1t * m.data[i] + (T::one() - b1t) * gi;
                v.data[i] = b2t * v.data[i] + (T::one() - b2t) * gi * gi;
                p.data[i] -= step_size * m.data[i] / (v.data[i].sqrt() + eps_hat);
            }
        }
        self.apply_mask_to_params();
        Ok(loss)
    }

    /// Teacher-forced predictions where frames are given; autoregressive
    /// decoding otherwise, capped at `max_frames`.
    pub fn forward(&self, batch: &[Utterance], max_frames: usize) -> Result<Vec<Prediction>, ModelError> {
        batch
            .iter()
            .map(|u| {
                let p = self.prepare(u)?;
                match &p.frames {
                    Some(frames) => {
                        let mut g = Graph::new(&self.config, &self.layout, &self.params, &self.mask_rows, false, None);
                        let r = g.record(&p.ids, p.lang, p.spk, frames);
                        Ok(self.prediction(&g, r.mel, r.post, r.stop, true))
                    }
                    None => self.decode_autoregressive(&p, max_frames),
                }
            })
            .collect()
    }

    fn prediction(&self, g: &Graph<T>, mel: Var, post: Option<Var>, stop: Var, terminated: bool) -> Prediction {
        let frames = g.tape.value(mel).cast();
        let postnet = post.map(|p| g.tape.value(p).cast()).unwrap_or_else(|| frames.clone());
        let stop_logits = g.tape.value(stop).data.iter().map(|z| z.as_f64() as f32).collect();
        Prediction { frames, postnet, stop_logits, terminated }
    }

    /// Autoregressive synthesis for any language/speaker pairing.
    pub fn synthesize(&self, text: &str, language: &str, speaker: &str, max_frames: usize) -> Result<Prediction, ModelError> {
        let p = self.prepare(&Utterance::text(text, language, speaker))?;
        self.decode_autoregressive(&p, max_frames)
    }

    fn decode_autoregressive(&self, p: &Prepared<T>, max_frames: usize) -> Result<Prediction, ModelError> {
        if max_frames == 0 {
            return Err(ModelError::Shape("max_frames must be at least 1".into()));
        }
        let d = self.config.d_mel;
        let memory = {
            let mut g = Graph::new(&self.config, &self.layout, &self.params, &self.mask_rows, false, None);
            let mut taps = Vec::new();
            let m = g.encode(&p.ids, p.lang, p.spk, &mut taps);
            g.tape.value(m).clone()
        };
        let mut frames: Vec<T> = Vec::new();
        let mut n = 0;
        let mut terminated = false;
        loop {
            let mut g = Graph::new(&self.config, &self.layout, &self.params, &self.mask_rows, false, None);
            let mem = g.tape.constant(memory.clone());
            let mut dec_in = Tensor::zeros(n + 1, d);
            dec_in.data[d..].copy_from_slice(&frames);
            let dec_in = g.tape.constant(dec_in);
            let mut taps = Vec::new();
            let (mel, post, stop) = g.decode(mem, dec_in, &mut taps);
            let mv = g.tape.value(mel);
            if !mv.all_finite() {
                return Err(ModelError::NonFinite("synthesized frames".into()));
            }
            frames.extend_from_slice(mv.row(n));
            n += 1;
            let z = g.tape.value(stop).data[n - 1];
            if sigmoid(z) > T::of(0.5) {
                terminated = true;
            }
            if terminated || n == max_frames {
                return Ok(self.prediction(&g, mel, post, stop, terminated));
            }
        }
    }
}

struct LossVars {
    frame: Var,
    post: Option<Var>,
    stop: Var,
    total: Var,
}

#[cfg(test)]
mod tests;
