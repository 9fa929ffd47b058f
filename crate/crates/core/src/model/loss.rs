use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Frame MSE before the post-net.
    pub frame_loss: f64,
    /// Frame MSE after the post-net; zero when the post-net is disabled.
    pub postnet_loss: f64,
    /// Mean stop-token binary cross-entropy.
    pub stop_loss: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub frame: f64,
    pub postnet: f64,
    pub stop: f64,
}

/// Padded batch loss. Each tensor is `T_pad x D`; `stop_logits[b]` has
/// `T_pad` entries; only the first `lengths[b]` steps of record `b` count.
/// `post` may be empty when the model has no post-net.
pub fn loss<T: Real>(
    pred: &[Tensor<T>],
    post: &[Tensor<T>],
    stop_logits: &[Vec<T>],
    targets: &[Tensor<T>],
    lengths: &[usize],
    weights: LossWeights,
) -> Result<LossBreakdown, ModelError> {
    let b = pred.len();
    if targets.len() != b || stop_logits.len() != b || lengths.len() != b || !(post.is_empty() || post.len() == b) {
        return Err(ModelError::Shape("batch sizes disagree".into()));
    }
    let mut frame_sse = 0.0;
    let mut post_sse = 0.0;
    let mut bce = 0.0;
    let mut n_frames = 0usize;
    let mut d = 0usize;
    for i in 0..b {
        let (p, t, len) = (&pred[i], &targets[i], lengths[i]);
        if p.shape() != t.shape() || stop_logits[i].len() != p.rows || len > p.rows {
            return Err(ModelError::Shape(format!("record {i}: inconsistent shapes or length")));
        }
        if !post.is_empty() && post[i].shape() != p.shape() {
            return Err(ModelError::Shape(format!("record {i}: post-net shape")));
        }
        d = p.cols;
        n_frames += len;
        for r in 0..len {
            for c in 0..p.cols {
                let (pv, tv) = (p.at(r, c).as_f64(), t.at(r, c).as_f64());
                if !pv.is_finite() || !tv.is_finite() {
                    return Err(ModelError::NonFinite("loss input".into()));
                }
                frame_sse += (pv - tv).powi(2);
                if !post.is_empty() {
                    let q = post[i].at(r, c).as_f64();
                    if !q.is_finite() {
                        return Err(ModelError::NonFinite("loss input".into()));
                    }
                    post_sse += (q - tv).powi(2);
                }
            }
            let z = stop_logits[i][r].as_f64();
            if !z.is_finite() {
                return Err(ModelError::NonFinite("stop logit".into()));
            }
            let y = if r + 1 == len { 1.0 } else { 0.0 };
            bce += bce_term(z, y);
        }
    }
    if n_frames == 0 || d == 0 {
        return Err(ModelError::Shape("batch has no frames".into()));
    }
    let frame_loss = frame_sse / (n_frames * d) as f64;
    let postnet_loss = post_sse / (n_frames * d) as f64;
    let stop_loss = bce / n_frames as f64;
    Ok(LossBreakdown {
        frame_loss,
        postnet_loss,
        stop_loss,
        total: weights.frame * frame_loss + weights.postnet * postnet_loss + weights.stop * stop_loss,
    })
}

/// Numerically stable `-(y ln σ(z) + (1-y) ln(1-σ(z)))`.
pub(crate) fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
