//! Model architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::fnv1a64;

/// Architecture of the frozen encoder/decoder pair and the prompt geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_side: usize,
    /// Encoder embedding width D.
    pub embed_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_dim: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    /// Fraction of patches hidden from the encoder in restore mode.
    pub mask_ratio: f32,
    /// Rows of the discriminative prompt per encoder block.
    pub disc_prompt_len: usize,
    /// How many leading encoder blocks carry a discriminative prompt segment.
    pub disc_prompt_blocks: usize,
    /// Rows of the reconstructive prompt (first decoder block only).
    pub recon_prompt_len: usize,
}

impl ModelConfig {
    /// The default used by experiments: 32x32x3 images, trains in minutes on a CPU.
    pub fn desk_scale() -> Self {
        Self {
            image_side: 32,
            channels: 3,
            patch_side: 4,
            embed_dim: 96,
            encoder_blocks: 6,
            decoder_dim: 48,
            decoder_blocks: 2,
            heads: 4,
            mask_ratio: 0.75,
            disc_prompt_len: 20,
            disc_prompt_blocks: 5,
            recon_prompt_len: 5,
        }
    }

    /// A minimal config for gradient checks: 2 blocks, dim 16.
    pub fn tiny() -> Self {
        Self {
            image_side: 8,
            channels: 1,
            patch_side: 4,
            embed_dim: 16,
            encoder_blocks: 2,
            decoder_dim: 8,
            decoder_blocks: 2,
            heads: 2,
            mask_ratio: 0.5,
            disc_prompt_len: 3,
            disc_prompt_blocks: 5,
            recon_prompt_len: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.patch_side == 0 || self.channels == 0 {
            return Err(Error::Config("image/patch dimensions must be positive".into()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.decoder_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder_dim {} not divisible by heads {}",
                self.decoder_dim, self.heads
            )));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::Config("need at least one encoder and decoder block".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1]",
                self.mask_ratio
            )));
        }
        if self.visible_count() == 0 {
            return Err(Error::Config(format!(
                "mask_ratio {} leaves no visible patches",
                self.mask_ratio
            )));
        }
        if self.recon_prompt_len == 0 || self.disc_prompt_len == 0 {
            return Err(Error::Config("prompt lengths must be positive".into()));
        }
        Ok(())
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        let side = self.image_side / self.patch_side;
        side * side
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    /// Visible patches in restore mode: round((1 - mask_ratio) * N).
    pub fn visible_count(&self) -> usize {
        ((1.0 - self.mask_ratio as f64) * self.num_patches() as f64).round() as usize
    }

    /// Encoder blocks that actually carry a discriminative prompt segment.
    pub fn prompted_blocks(&self) -> usize {
        self.disc_prompt_blocks.min(self.encoder_blocks)
    }

    /// Stable hash over every architecture field; stamped into wire records.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(12 * 8);
        for v in [
            self.image_side,
            self.channels,
            self.patch_side,
            self.embed_dim,
            self.encoder_blocks,
            self.decoder_dim,
            self.decoder_blocks,
            self.heads,
            self.disc_prompt_len,
            self.disc_prompt_blocks,
            self.recon_prompt_len,
        ] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&self.mask_ratio.to_le_bytes());
        fnv1a64(&bytes)
    }
}
