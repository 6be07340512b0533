use super::config::ModelConfig;
use super::params::{BlockSlots, Bound, DecoderSlots, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Cuts `[B, H, W, 3]` images into row-major `[B, N, 3·P²]` patch vectors.
/// Each patch is flattened as (row, column, channel).
pub fn extract_patches(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let (h, w, p) = (config.image_height, config.image_width, config.patch_size);
    if s.len() != 4 || s[1] != h || s[2] != w || s[3] != 3 {
        return Err(Error::config(format!(
            "image batch shape {s:?} does not match configured [B, {h}, {w}, 3]"
        )));
    }
    let batch = s[0];
    let (gh, gw) = (config.grid_height(), config.grid_width());
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for b in 0..batch {
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    let row = ((b * h + ty * p + py) * w + tx * p) * 3;
                    out.extend_from_slice(&src[row..row + 3 * p]);
                }
            }
        }
    }
    Tensor::new(vec![batch, gh * gw, config.patch_dim()], out)
}

/// The network's operators bound to one graph's parameter leaves.
#[derive(Debug, Clone, Copy)]
pub struct Net<'a> {
    pub params: &'a Bound,
    pub config: &'a ModelConfig,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a Bound, config: &'a ModelConfig) -> Self {
        Self { params, config }
    }

    /// Linear patch embedding plus learned positional embedding: `[B, N, D]`.
    pub fn patch_embed(&self, g: &mut Graph, images: &Tensor) -> Result<Var> {
        let patches = g.constant(extract_patches(images, self.config)?);
        let l = &self.params.layout;
        let x = g.linear(
            patches,
            self.params.var(l.embed_weight),
            Some(self.params.var(l.embed_bias)),
        )?;
        g.add_broadcast(x, self.params.var(l.pos_embed))
    }

    /// Encoder layer `index` (0-based) on any number of active tokens.
    pub fn encoder_layer(&self, g: &mut Graph, index: usize, x: Var) -> Result<Var> {
        let block = self.params.layout.blocks.get(index).ok_or(Error::Index {
            index,
            len: self.params.layout.blocks.len(),
        })?;
        self.block(g, block, x)
    }

    /// Pre-norm residual block: `x + MHSA(LN(x))`, then `+ FFN(LN(·))`.
    pub fn block(&self, g: &mut Graph, slots: &BlockSlots, x: Var) -> Result<Var> {
        let attn = self.attention_branch(g, slots, x)?;
        let x = g.add(x, attn)?;
        let ffn = self.ffn_branch(g, slots, x)?;
        g.add(x, ffn)
    }

    pub fn attention_branch(&self, g: &mut Graph, s: &BlockSlots, x: Var) -> Result<Var> {
        let p = self.params;
        let shape = g.shape(x).to_vec();
        let (batch, n, d) = match shape[..] {
            [b, n, d] => (b, n, d),
            _ => {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let heads = self.config.num_heads;
        let dh = d / heads;
        let h = g.layernorm(x, p.var(s.ln1_gamma), p.var(s.ln1_beta))?;
        let mut split = |w, b| -> Result<Var> {
            let y = g.linear(h, p.var(w), Some(p.var(b)))?;
            let y = g.reshape(y, &[batch, n, heads, dh])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            g.reshape(y, &[batch * heads, n, dh])
        };
        let q = split(s.q_weight, s.q_bias)?;
        let k = split(s.k_weight, s.k_bias)?;
        let v = split(s.v_weight, s.v_bias)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[batch, heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch, n, d])?;
        g.linear(ctx, p.var(s.out_weight), Some(p.var(s.out_bias)))
    }

    pub fn ffn_branch(&self, g: &mut Graph, s: &BlockSlots, x: Var) -> Result<Var> {
        let p = self.params;
        let h = g.layernorm(x, p.var(s.ln2_gamma), p.var(s.ln2_beta))?;
        let h = g.linear(h, p.var(s.fc1_weight), Some(p.var(s.fc1_bias)))?;
        let h = g.gelu(h)?;
        g.linear(h, p.var(s.fc2_weight), Some(p.var(s.fc2_bias)))
    }

    /// Shared auxiliary decoder: per-token affine map to `[B, n, K]` logits.
    pub fn aux_decode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = &self.params.layout;
        g.linear(x, self.params.var(l.aux_weight), Some(self.params.var(l.aux_bias)))
    }

    /// Main decoder at token resolution: `[B, n, D]` to `[B, n, K]`.
    ///
    /// Works on any token subset; the mask transformer attends jointly over
    /// the given tokens and the class embeddings.
    pub fn decode_tokens(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.params;
        match &p.layout.decoder {
            DecoderSlots::Linear { weight, bias } => g.linear(x, p.var(*weight), Some(p.var(*bias))),
            DecoderSlots::Mask { class_embed, blocks } => {
                let (batch, n, d) = match g.shape(x)[..] {
                    [b, n, d] => (b, n, d),
                    ref s => {
                        return Err(Error::Dimension {
                            op: "decode",
                            lhs: s.to_vec(),
                            rhs: vec![],
                        })
                    }
                };
                let k = self.config.num_classes;
                let cls = g.repeat_batch(p.var(*class_embed), batch)?;
                let mut seq = g.concat_tokens(x, cls)?;
                for block in blocks {
                    seq = self.block(g, block, seq)?;
                }
                let patches = g.slice_tokens(seq, 0, n)?;
                let classes = g.slice_tokens(seq, n, k)?;
                let logits = g.bmm(patches, classes, true)?;
                g.scale(logits, 1.0 / (d as f64).sqrt())
            }
        }
    }

    /// Reshapes full-grid token logits `[B, N, K]` and upsamples to `[B, H, W, K]`.
    pub fn to_pixels(&self, g: &mut Graph, token_logits: Var) -> Result<Var> {
        let c = self.config;
        let s = g.shape(token_logits).to_vec();
        if s.len() != 3 || s[1] != c.num_tokens() || s[2] != c.num_classes {
            return Err(Error::contract(format!(
                "expected token logits [B, {}, {}], got {s:?}",
                c.num_tokens(),
                c.num_classes
            )));
        }
        let grid = g.reshape(token_logits, &[s[0], c.grid_height(), c.grid_width(), s[2]])?;
        g.upsample_bilinear(grid, c.image_height, c.image_width)
    }

    /// Main decoder over all `N` tokens, upsampled to pixel logits.
    pub fn decode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.shape(x).get(1).copied().unwrap_or(0);
        if n != self.config.num_tokens() {
            return Err(Error::contract(format!(
                "decoder needs all {} tokens, got {n}",
                self.config.num_tokens()
            )));
        }
        let logits = self.decode_tokens(g, x)?;
        self.to_pixels(g, logits)
    }
}

/// Unpaused forward pass: embed, all encoder layers, decode. `[B, H, W, K]` logits.
pub fn forward_full(images: &Tensor, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let net = Net::new(&bound, params.config());
    let mut x = net.patch_embed(&mut g, images)?;
    for layer in 0..params.config().num_layers {
        x = net.encoder_layer(&mut g, layer, x)?;
    }
    let out = net.decode(&mut g, x)?;
    Ok(g.value(out).clone())
}
