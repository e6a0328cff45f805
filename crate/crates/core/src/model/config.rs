use serde::{Deserialize, Serialize};

use crate::data::tokenizer;
use crate::error::{Error, Result};
use crate::flow::DEFAULT_EPS_T;
use crate::patch::PatchGrid;
use crate::tensor::DType;

/// Hyperparameters of the unified transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub eps_t: f64,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 128-wide, 4 layers, 4 heads, 16×16 RGB images in 4×4 patches.
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 64,
            max_seq_len: 64,
            image_size: 16,
            channels: 3,
            patch_size: 4,
            eps_t: DEFAULT_EPS_T,
            dtype: DType::F32,
        }
    }

    /// Smaller stack used for the calibrated training runs.
    pub fn tiny() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ..Self::desk()
        }
    }

    /// Under 10k parameters, f64, for finite-difference checks.
    pub fn gradcheck() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2,
            vocab_size: tokenizer::vocab_len(),
            max_seq_len: 32,
            dtype: DType::F64,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "gradcheck" => Ok(Self::gradcheck()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            height_px: self.image_size,
            width_px: self.image_size,
            channels: self.channels,
            patch_size: self.patch_size,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even for the sinusoidal time embedding".into());
        }
        if self.vocab_size < tokenizer::vocab_len() {
            return bad(format!(
                "vocab_size {} is smaller than the tokenizer's {}",
                self.vocab_size,
                tokenizer::vocab_len()
            ));
        }
        if !(self.eps_t > 0.0 && self.eps_t < 1.0) {
            return bad(format!("eps_t must be in (0, 1), got {}", self.eps_t));
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16".into());
        }
        self.grid().validate()?;
        if self.max_seq_len < self.grid().token_count() + 2 {
            return bad("max_seq_len cannot hold an image plus text".into());
        }
        Ok(())
    }
}
