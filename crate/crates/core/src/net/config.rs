use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where learnable prompt tokens enter the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Fresh prompts are prepended at every encoder layer and dropped at its output.
    PerLayer,
    /// Prompts are prepended once, carried through all layers, then dropped.
    FirstLayerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    /// Hidden width of every MLP, as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub prompt_len: usize,
    pub prompt_mode: PromptMode,
    pub width: usize,
    pub height: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            mlp_ratio: 4,
            prompt_len: 32,
            prompt_mode: PromptMode::PerLayer,
            width: 64,
            height: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Input(format!("model config: {m}")));
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("patch size, width, heads and mlp ratio must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("need at least one encoder and one decoder layer".into());
        }
        if self.width == 0
            || self.height == 0
            || self.width % self.patch_size != 0
            || self.height % self.patch_size != 0
        {
            return fail(format!(
                "image {}×{} is not a positive multiple of patch size {}",
                self.width, self.height, self.patch_size
            ));
        }
        if self.embed_dim % 4 != 0 {
            return fail("embed_dim must be a multiple of 4 for 2-D sinusoidal positions".into());
        }
        Ok(())
    }

    pub fn patches_x(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn patches_y(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_x() * self.patches_y()
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Number of prompt arrays: one per encoder layer, or a single one.
    pub fn prompt_groups(&self) -> usize {
        match self.prompt_mode {
            PromptMode::PerLayer => self.encoder_layers,
            PromptMode::FirstLayerOnly => 1,
        }
    }

    pub fn prompt_params(&self) -> usize {
        self.prompt_groups() * self.prompt_len * self.embed_dim
    }
}
