use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// Per-token affine map to class logits.
    Linear,
    /// Learned class embeddings processed jointly with the patch tokens.
    MaskTransformer,
}

/// Architecture hyperparameters of the segmentation transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Hidden width of the feed-forward block; `4 * embed_dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    pub decoder_kind: DecoderKind,
    #[serde(default = "default_mask_layers")]
    pub mask_decoder_layers: usize,
}

fn default_mask_layers() -> usize {
    2
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.image_height == 0 || self.image_width == 0 {
            return Err(Error::config("image and patch sizes must be positive"));
        }
        if !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by patch size {p}",
                self.image_height, self.image_width
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be >= 2"));
        }
        if self.num_classes > 255 {
            return Err(Error::config("num_classes must be < 256 (label 255 is reserved)"));
        }
        if self.ffn_hidden == Some(0) {
            return Err(Error::config("ffn_hidden must be positive"));
        }
        if self.decoder_kind == DecoderKind::MaskTransformer && self.mask_decoder_layers == 0 {
            return Err(Error::config("mask decoder needs at least one layer"));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.embed_dim)
    }

    pub fn grid_height(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_width(&self) -> usize {
        self.image_width / self.patch_size
    }

    /// Number of patch tokens `N = H·W / P²`.
    pub fn num_tokens(&self) -> usize {
        self.grid_height() * self.grid_width()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Parameter count, computed from the layout without allocating.
    pub fn parameter_count(&self) -> usize {
        super::params::Layout::new(self).parameter_count()
    }
}
