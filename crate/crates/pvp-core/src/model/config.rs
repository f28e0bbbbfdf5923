//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{PvpError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub patch_px: usize,
    /// Number of image tokens, `(canvas / patch)^2`.
    pub n_image_tokens: usize,
    pub max_seq: usize,
    pub tie_unembedding: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(PvpError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(PvpError::Config("n_layers must be positive".into()));
        }
        if self.vocab_size == 0 || self.mlp_hidden == 0 || self.patch_px == 0 {
            return Err(PvpError::Config(
                "vocab_size, mlp_hidden and patch_px must be positive".into(),
            ));
        }
        if self.n_image_tokens == 0 || self.max_seq <= self.n_image_tokens {
            return Err(PvpError::Config(format!(
                "max_seq {} must exceed n_image_tokens {}",
                self.max_seq, self.n_image_tokens
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flattened patch length: `patch_px^2 * 3` RGB values.
    pub fn patch_dim(&self) -> usize {
        self.patch_px * self.patch_px * 3
    }
}
