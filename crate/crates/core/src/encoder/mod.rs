//! Toy frozen vision-language encoder with demographic prompt tokens.

mod backbone;
mod prompts;
mod text;

pub use backbone::{EncodeOutput, FrozenBackbone, Image, SampleInput};
pub use prompts::{PromptSet, PromptVars};
pub use text::{build_prompt_templates, PromptTemplates, TextEncoder};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Transformer layers `L`.
    pub layers: usize,
    pub heads: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Demographic prompt tokens `K` per layer.
    pub prompt_tokens: usize,
    /// Hidden width of each MLP block, as a multiple of `dim`.
    pub mlp_ratio: usize,
    /// Similarity temperature applied before the contrastive losses.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 4,
            heads: 4,
            image_height: 32,
            image_width: 32,
            patch_height: 8,
            patch_width: 8,
            prompt_tokens: 2,
            mlp_ratio: 2,
            temperature: 0.07,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Patch count `J`.
    pub fn patches(&self) -> usize {
        (self.image_height / self.patch_height) * (self.image_width / self.patch_width)
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_height * self.patch_width
    }

    /// Layer-0 sequence length `1 + K + J` for image inputs.
    pub fn sequence_len(&self) -> usize {
        1 + self.prompt_tokens + self.patches()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.layers == 0 {
            return bad("at least one transformer layer is required");
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || self.image_height % self.patch_height != 0
            || self.image_width % self.patch_width != 0
        {
            return bad("image dimensions must be divisible by the patch size");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}
