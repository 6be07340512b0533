use crate::model::{DecoderKind, ModelConfig};
use crate::pausing::PauseConfig;

/// Analytical compute proxy. Per encoder layer on `n` tokens:
/// `4·n·D² + 2·n·D·F + 2·n²·D` multiply-adds (Q/K/V/out projections, FFN of
/// width `F`, attention scores and mixing), which is `12·n·D² + 2·n²·D` for
/// the usual `F = 4D`. A relative comparator, not a FLOP-exact model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub num_classes: usize,
    /// Mask-transformer blocks in the decoder (0 for a linear head).
    pub decoder_layers: usize,
}

impl CostModel {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            embed_dim: config.embed_dim,
            ffn_hidden: config.ffn_hidden(),
            num_layers: config.num_layers,
            num_tokens: config.num_tokens(),
            num_classes: config.num_classes,
            decoder_layers: match config.decoder_kind {
                DecoderKind::Linear => 0,
                DecoderKind::MaskTransformer => config.mask_decoder_layers,
            },
        }
    }

    pub fn layer_cost(&self, n: usize) -> f64 {
        let (n, d, f) = (n as f64, self.embed_dim as f64, self.ffn_hidden as f64);
        4.0 * n * d * d + 2.0 * n * d * f + 2.0 * n * n * d
    }

    /// Decoder on all `N` tokens.
    pub fn decoder_cost(&self) -> f64 {
        let (n, d, k) = (self.num_tokens, self.embed_dim as f64, self.num_classes);
        self.decoder_layers as f64 * self.layer_cost(n + k) + (n * k) as f64 * d
    }

    pub fn active_counts(&self, config: &PauseConfig) -> Vec<usize> {
        config.active_counts(self.num_tokens, self.num_layers)
    }

    /// Σ over encoder layers of the active-token count.
    pub fn token_layer_products(&self, config: &PauseConfig) -> usize {
        self.active_counts(config).iter().sum()
    }

    /// Encoder + auxiliary decoding at each stage + main decoder.
    pub fn total_cost(&self, config: &PauseConfig) -> f64 {
        let counts = self.active_counts(config);
        let encoder: f64 = counts.iter().map(|&n| self.layer_cost(n)).sum();
        let aux: f64 = config
            .stages()
            .iter()
            .map(|s| (counts[s.layer - 1] * self.num_classes) as f64 * self.embed_dim as f64)
            .sum();
        encoder + aux + self.decoder_cost()
    }
}
