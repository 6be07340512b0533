use serde::{Deserialize, Serialize};

use super::config::PauseConfig;
use super::select::{EntropySelector, TokenSelector};
use super::state::{assemble, assemble_logits, pause_step, PauseState};
use crate::error::Result;
use crate::model::{ModelParams, Net};
use crate::numerics::{Graph, Tensor, Var};

/// Active-token counts per encoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PauseStats {
    /// Tokens entering each layer, layer 1 first.
    pub per_layer_active: Vec<usize>,
    /// Sum of `per_layer_active`.
    pub token_layer_products: usize,
}

impl PauseStats {
    pub fn from_active(per_layer_active: Vec<usize>) -> Self {
        let token_layer_products = per_layer_active.iter().sum();
        Self {
            per_layer_active,
            token_layer_products,
        }
    }
}

/// Encoder output with the pause bookkeeping needed to decode it.
#[derive(Debug)]
pub struct Encoded {
    /// Tokens still active after the last layer, `[B, n_L, D]`.
    pub tokens: Var,
    pub state: PauseState,
    pub stats: PauseStats,
}

/// Embeds `images` and runs every encoder layer, pausing after each layer
/// named in `config`.
pub fn encode(
    g: &mut Graph,
    net: &Net<'_>,
    images: &Tensor,
    config: &PauseConfig,
    selector: &mut dyn TokenSelector,
) -> Result<Encoded> {
    let layers = net.config.num_layers;
    config.validate(layers)?;
    let mut x = net.patch_embed(g, images)?;
    let mut state = PauseState::new();
    let mut active = Vec::with_capacity(layers);
    for layer in 1..=layers {
        active.push(g.shape(x)[1]);
        x = net.encoder_layer(g, layer - 1, x)?;
        if let Some(tau) = config.tau_at(layer) {
            x = pause_step(g, net, x, layer, tau, selector, &mut state)?;
        }
    }
    Ok(Encoded {
        tokens: x,
        state,
        stats: PauseStats::from_active(active),
    })
}

/// Paused forward pass: paused tokens are reinserted before the main
/// decoder. Returns `[B, H, W, K]` logits.
pub fn forward_with_selector(
    images: &Tensor,
    params: &ModelParams,
    config: &PauseConfig,
    selector: &mut dyn TokenSelector,
) -> Result<(Tensor, PauseStats)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(&bound, params.config());
    let enc = encode(&mut g, &net, images, config, selector)?;
    let full = assemble(&mut g, enc.tokens, &enc.state)?;
    let out = net.decode(&mut g, full)?;
    Ok((g.value(out).clone(), enc.stats))
}

/// Entropy-guided paused forward pass.
pub fn forward_with_pausing(images: &Tensor, params: &ModelParams, config: &PauseConfig) -> Result<(Tensor, PauseStats)> {
    forward_with_selector(images, params, config, &mut EntropySelector)
}

/// Token-level early-exit logits `[B, N, K]`: the main decoder sees only the
/// final active tokens; paused positions keep their auxiliary logits.
pub fn early_exit_token_logits(g: &mut Graph, net: &Net<'_>, enc: &Encoded) -> Result<Var> {
    let last = net.decode_tokens(g, enc.tokens)?;
    assemble_logits(g, last, &enc.state)
}

/// Entropy-guided early-exit forward pass. Returns `[B, H, W, K]` logits.
pub fn forward_early_exit(images: &Tensor, params: &ModelParams, config: &PauseConfig) -> Result<(Tensor, PauseStats)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(&bound, params.config());
    let enc = encode(&mut g, &net, images, config, &mut EntropySelector)?;
    let tokens = early_exit_token_logits(&mut g, &net, &enc)?;
    let out = net.to_pixels(&mut g, tokens)?;
    Ok((g.value(out).clone(), enc.stats))
}
