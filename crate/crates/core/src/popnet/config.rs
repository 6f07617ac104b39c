use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the spatial and temporal attention inside each decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    SpatialFirst,
    TemporalFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub stacks: usize,
    /// Fraction of frames hidden from temporal attention during training.
    pub mask_ratio: f64,
    pub halve_after_enhance: bool,
    /// Apply the spine-chain augmentation inside spatial attention.
    pub space_augment: bool,
    /// Channel width of each pose token in spatial attention.
    pub token_width: usize,
    /// Number of feature tokens the music hidden state is split into.
    pub music_tokens: usize,
    pub music_token_width: usize,
    /// Input music feature channels.
    pub music_width: usize,
    /// One variance weight per frame instead of per frame-channel.
    pub v_per_frame: bool,
    pub zero_init_heads: bool,
    pub block_order: BlockOrder,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            mlp: 1024,
            heads: 8,
            stacks: 4,
            mask_ratio: 0.1,
            halve_after_enhance: true,
            space_augment: true,
            token_width: 64,
            music_tokens: 32,
            music_token_width: 16,
            music_width: 4800,
            v_per_frame: false,
            zero_init_heads: true,
            block_order: BlockOrder::SpatialFirst,
        }
    }
}

impl AttentionConfig {
    /// Smallest useful network: hidden 16, 2 heads, one stack.
    pub fn tiny(music_width: usize) -> Self {
        Self {
            hidden: 16,
            mlp: 32,
            heads: 2,
            stacks: 1,
            token_width: 4,
            music_tokens: 4,
            music_token_width: 4,
            music_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("mlp", self.mlp),
            ("heads", self.heads),
            ("stacks", self.stacks),
            ("token_width", self.token_width),
            ("music_tokens", self.music_tokens),
            ("music_token_width", self.music_token_width),
            ("music_width", self.music_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "heads",
                format!("hidden {} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.token_width % self.heads != 0 {
            return Err(Error::config(
                "token_width",
                format!("{} is not divisible by {} heads", self.token_width, self.heads),
            ));
        }
        if self.music_tokens * self.music_token_width != self.hidden {
            return Err(Error::config(
                "music_tokens",
                format!(
                    "{} tokens x {} channels != hidden {}",
                    self.music_tokens, self.music_token_width, self.hidden
                ),
            ));
        }
        if self.music_token_width % self.heads != 0 {
            return Err(Error::config(
                "music_token_width",
                format!("{} is not divisible by {} heads", self.music_token_width, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio", format!("{} not in [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}
