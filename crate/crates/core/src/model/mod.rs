//! Segmenter-style encoder/decoder: patch embedding, pre-norm transformer
//! blocks, a shared auxiliary decoder and a linear or mask-transformer head.

mod config;
mod forward;
mod params;
#[cfg(test)]
pub(crate) mod reference;

pub use config::{DecoderKind, ModelConfig};
pub use forward::{extract_patches, forward_full, Net};
pub use params::{BlockSlots, Bound, DecoderSlots, Layout, ModelParams, Slot, INIT_STD};

/// `[B, n, D]` token representation; a plain [`crate::numerics::Tensor`].
pub type TokenMatrix = crate::numerics::Tensor;

#[cfg(test)]
pub(crate) fn toy_config() -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 32,
        patch_size: 8,
        embed_dim: 8,
        num_layers: 3,
        num_heads: 2,
        num_classes: 3,
        ffn_hidden: None,
        decoder_kind: DecoderKind::Linear,
        mask_decoder_layers: 2,
    }
}

/// Initialized parameters with every tensor jittered, so biases and
/// positional embeddings are non-zero in tests.
#[cfg(test)]
pub(crate) fn jittered_params(config: &ModelConfig, seed: u64, scale: f64) -> ModelParams {
    use rand::Rng;
    let mut rng = crate::numerics::testutil::rng(seed);
    let mut p = ModelParams::init(config, &mut rng).unwrap();
    if scale == 0.0 {
        return p;
    }
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    p
}

#[cfg(test)]
pub(crate) fn random_images(config: &ModelConfig, batch: usize, seed: u64) -> crate::numerics::Tensor {
    crate::numerics::testutil::random_tensor(
        &mut crate::numerics::testutil::rng(seed),
        &[batch, config.image_height, config.image_width, 3],
        1.0,
    )
}
