//! Model hyperparameters. The `desk` profile is small enough to train on a
//! laptop CPU in minutes; the `paper` profile mirrors the published sizes.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared decoder / audio-encoder width.
    pub d_model: usize,
    pub audio_enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_enc_layers: usize,
    /// Text encoder width; a projection maps it to `d_model`.
    pub text_enc_dim: usize,
    /// Output channels of the two conv blocks; the last must equal
    /// `d_model`. Each block is a 3x3 same-padded conv, ReLU, and a x2
    /// temporal max-pool.
    pub cnn_channels: Vec<usize>,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// Mel bins expected on the audio input.
    pub n_mels: usize,
}

impl ModelConfig {
    /// Laptop-scale profile.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            audio_enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            ffn_dim: 128,
            text_enc_layers: 2,
            text_enc_dim: 96,
            cnn_channels: vec![8, 64],
            dropout: 0.0,
            vocab_size,
            max_positions: 256,
            n_mels: 80,
        }
    }

    /// The published configuration: 12-layer audio encoder, 6-layer decoder,
    /// 4 heads, 256 units, 2048 hidden units, 2-layer CNN with 256 final
    /// units.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            d_model: 256,
            audio_enc_layers: 12,
            dec_layers: 6,
            heads: 4,
            ffn_dim: 2048,
            text_enc_layers: 12,
            text_enc_dim: 768,
            cnn_channels: vec![256, 256],
            dropout: 0.1,
            vocab_size,
            max_positions: 1024,
            n_mels: 80,
        }
    }

    /// Tiny profile for finite-difference gradient checks.
    pub fn grad_check(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            audio_enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 24,
            text_enc_layers: 1,
            text_enc_dim: 20,
            cnn_channels: vec![2, 16],
            dropout: 0.0,
            vocab_size,
            max_positions: 64,
            n_mels: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::ConfigMismatch(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be divisible by heads {}", self.d_model, self.heads));
        }
        if self.text_enc_dim % self.heads != 0 {
            return bad(format!(
                "text_enc_dim {} must be divisible by heads {}",
                self.text_enc_dim, self.heads
            ));
        }
        if self.cnn_channels.len() != 2 {
            return bad(format!("expected 2 conv blocks, got {}", self.cnn_channels.len()));
        }
        if *self.cnn_channels.last().unwrap() != self.d_model {
            return bad(format!(
                "final conv channels {} must equal d_model {}",
                self.cnn_channels.last().unwrap(),
                self.d_model
            ));
        }
        let counts = [
            self.audio_enc_layers,
            self.dec_layers,
            self.text_enc_layers,
            self.ffn_dim,
            self.vocab_size,
            self.max_positions,
            self.n_mels,
            self.cnn_channels[0],
        ];
        if counts.iter().any(|&c| c == 0) {
            return bad("all size fields must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} out of range", self.dropout));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ModelConfig::desk(100).validate().unwrap();
        ModelConfig::paper(5000).validate().unwrap();
        ModelConfig::grad_check(12).validate().unwrap();
    }

    #[test]
    fn head_divisibility_is_enforced() {
        let mut cfg = ModelConfig::desk(100);
        cfg.d_model = 65;
        cfg.cnn_channels = vec![8, 65];
        assert!(cfg.validate().is_err());
    }
}
