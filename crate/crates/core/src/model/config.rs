use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PoolKind;

/// Architecture and scalar hyperparameters of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared width `D` of text and image fragments.
    pub d_model: usize,
    /// Number of stacked alignment layers `K`.
    pub layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    /// Similarity threshold shift.
    pub gamma: f64,
    /// Inverse softmax temperature of the cross-modal attention.
    pub lambda: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
    pub max_summary_len: usize,
    pub pooling: PoolKind,
    pub relu_in_denominator: bool,
    pub self_attention_in_cam: bool,
    pub share_gates: bool,
    pub tie_embeddings: bool,
    pub image_positional: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            decoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 512,
            dropout: 0.3,
            gamma: -0.15,
            lambda: 6.0,
            tau: 0.1,
            channels: 3,
            height: 16,
            width: 16,
            patch_size: 4,
            max_text_len: 500,
            max_summary_len: 16,
            pooling: PoolKind::Mean,
            relu_in_denominator: false,
            self_attention_in_cam: false,
            share_gates: false,
            tie_embeddings: false,
            image_positional: false,
        }
    }
}

impl ModelConfig {
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return fail("d_model, layers, heads and ffn_dim must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.gamma.is_finite() {
            return fail("gamma must be finite".into());
        }
        if !(self.lambda > 0.0) || !(self.tau > 0.0) {
            return fail("lambda and tau must be positive".into());
        }
        if self.vocab_size <= crate::representation::SPECIAL_TOKENS.len() {
            return fail("vocab_size must exceed the reserved tokens".into());
        }
        if self.patch_size == 0
            || !self.height.is_multiple_of(self.patch_size)
            || !self.width.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch_size
            ));
        }
        if self.channels == 0 {
            return fail("channels must be positive".into());
        }
        if self.max_text_len < 3 || self.max_summary_len < 2 {
            return fail("length caps too small".into());
        }
        Ok(())
    }
}
