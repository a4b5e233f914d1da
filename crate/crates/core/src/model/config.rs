use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a dual-encoder pass summarizes a sequence into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final hidden state of the class token.
    #[default]
    Cls,
    /// Mean of the final hidden states of all non-padding tokens.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub patch_size: usize,
    pub image_size: usize,
    /// Number of top layers that also carry a vision-language expert.
    pub vl_expert_layers: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Width of the shared retrieval embedding space.
    pub proj_dim: usize,
    pub pooling: Pooling,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers of width 64 over 32x32 images.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn_hidden: 256,
            patch_size: 8,
            image_size: 32,
            vl_expert_layers: 3,
            vocab_size,
            max_text_len: 48,
            proj_dim: 64,
            pooling: Pooling::Cls,
        }
    }

    /// BEiT-3-base sized configuration at 224x224 with 16-pixel patches.
    pub fn paper_scale() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            ffn_hidden: 3072,
            patch_size: 16,
            image_size: 224,
            vl_expert_layers: 3,
            vocab_size: 64010,
            max_text_len: 64,
            proj_dim: 768,
            pooling: Pooling::Cls,
        }
    }

    /// Smallest shape that still exercises every code path.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn_hidden: 12,
            patch_size: 4,
            image_size: 8,
            vl_expert_layers: 1,
            vocab_size,
            max_text_len: 16,
            proj_dim: 6,
            pooling: Pooling::Cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if [
            self.layers,
            self.hidden,
            self.heads,
            self.ffn_hidden,
            self.patch_size,
            self.image_size,
            self.vocab_size,
            self.max_text_len,
            self.proj_dim,
        ]
        .contains(&0)
        {
            return fail("all sizes must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vl_expert_layers > self.layers {
            return fail(format!(
                "vl_expert_layers {} exceeds layers {}",
                self.vl_expert_layers, self.layers
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Image tokens per image, class token included.
    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn has_vl_expert(&self, layer: usize) -> bool {
        layer >= self.layers - self.vl_expert_layers
    }

    /// Closed-form parameter count for this layout.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.hidden, self.ffn_hidden, self.vocab_size);
        let text = v * d + self.max_text_len * d;
        let image = self.patch_dim() * d + d + 2 * self.grid() * d;
        let attention = 2 * d + 4 * (d * d + d);
        let expert = 2 * d + d * f + f + f * d + d;
        let experts = 2 * self.layers + self.vl_expert_layers;
        let head = 2 * d + 2 * d * self.proj_dim + 1;
        text + image + self.layers * attention + experts * expert + head
    }

    pub(crate) fn to_values(self) -> Vec<f32> {
        [
            self.layers,
            self.hidden,
            self.heads,
            self.ffn_hidden,
            self.patch_size,
            self.image_size,
            self.vl_expert_layers,
            self.vocab_size,
            self.max_text_len,
            self.proj_dim,
            match self.pooling {
                Pooling::Cls => 0,
                Pooling::Mean => 1,
            },
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }

    pub(crate) fn from_values(v: &[f32]) -> Result<Self> {
        if v.len() != 11 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(Error::Malformed("config entry".into()));
        }
        let u = |i: usize| v[i] as usize;
        let pooling = match u(10) {
            0 => Pooling::Cls,
            1 => Pooling::Mean,
            p => return Err(Error::Malformed(format!("pooling code {p}"))),
        };
        let cfg = ModelConfig {
            layers: u(0),
            hidden: u(1),
            heads: u(2),
            ffn_hidden: u(3),
            patch_size: u(4),
            image_size: u(5),
            vl_expert_layers: u(6),
            vocab_size: u(7),
            max_text_len: u(8),
            proj_dim: u(9),
            pooling,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
