use serde::{Deserialize, Serialize};

use super::ModelError;

/// Architecture and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_mel: usize,
    /// Convolutional residual post-net depth; 0 disables it.
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub lang_embed_dim: usize,
    pub speaker_embed_dim: usize,
    /// Language symbols, in embedding-row order.
    pub languages: Vec<String>,
    /// Speaker symbols, in embedding-row order.
    pub speakers: Vec<String>,
    pub frame_loss_weight: f64,
    pub postnet_loss_weight: f64,
    pub stop_loss_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            d_mel: 16,
            postnet_layers: 2,
            postnet_channels: 32,
            postnet_kernel: 5,
            prenet_dim: 64,
            prenet_dropout: 0.5,
            lang_embed_dim: 16,
            speaker_embed_dim: 16,
            languages: Vec::new(),
            speakers: Vec::new(),
            frame_loss_weight: 1.0,
            postnet_loss_weight: 1.0,
            stop_loss_weight: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        let dims = [
            self.enc_layers,
            self.dec_layers,
            self.heads,
            self.d_model,
            self.d_ff,
            self.d_mel,
            self.prenet_dim,
            self.lang_embed_dim,
            self.speaker_embed_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return bad("all dimensions must be at least 1");
        }
        if self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.postnet_layers > 0 && (self.postnet_channels == 0 || self.postnet_kernel % 2 == 0) {
            return bad("postnet needs channels and an odd kernel");
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return bad("prenet dropout must be in [0, 1)");
        }
        if self.languages.is_empty() || self.speakers.is_empty() {
            return bad("at least one language and one speaker are required");
        }
        let weights = [self.frame_loss_weight, self.postnet_loss_weight, self.stop_loss_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("loss weights must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn language_index(&self, id: &str) -> Result<usize, ModelError> {
        self.languages
            .iter()
            .position(|l| l == id)
            .ok_or_else(|| ModelError::UnknownLanguage(id.to_string()))
    }

    pub fn speaker_index(&self, id: &str) -> Result<usize, ModelError> {
        self.speakers
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| ModelError::UnknownSpeaker(id.to_string()))
    }
}
