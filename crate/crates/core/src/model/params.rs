use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DecoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Index of a parameter tensor in the canonical order.
pub type Slot = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Slots of one pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct BlockSlots {
    pub ln1_gamma: Slot,
    pub ln1_beta: Slot,
    pub q_weight: Slot,
    pub q_bias: Slot,
    pub k_weight: Slot,
    pub k_bias: Slot,
    pub v_weight: Slot,
    pub v_bias: Slot,
    pub out_weight: Slot,
    pub out_bias: Slot,
    pub ln2_gamma: Slot,
    pub ln2_beta: Slot,
    pub fc1_weight: Slot,
    pub fc1_bias: Slot,
    pub fc2_weight: Slot,
    pub fc2_bias: Slot,
}

#[derive(Debug, Clone)]
pub enum DecoderSlots {
    Linear { weight: Slot, bias: Slot },
    Mask { class_embed: Slot, blocks: Vec<BlockSlots> },
}

/// Canonical parameter order, names and shapes for a [`ModelConfig`].
///
/// The order is: patch embedding (weight, bias), positional embedding,
/// encoder blocks in depth order, auxiliary decoder (weight, bias), then the
/// main decoder. Within a block: ln1, q, k, v, out, ln2, fc1, fc2, each
/// weight before bias (layernorm: gamma before beta).
#[derive(Debug, Clone)]
pub struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
    pub embed_weight: Slot,
    pub embed_bias: Slot,
    pub pos_embed: Slot,
    pub blocks: Vec<BlockSlots>,
    pub aux_weight: Slot,
    pub aux_bias: Slot,
    pub decoder: DecoderSlots,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Slot {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize) -> BlockSlots {
        let w = |b: &mut Self, name: &str, shape: &[usize], init| b.add(format!("{prefix}.{name}"), shape, init);
        BlockSlots {
            ln1_gamma: w(self, "ln1.gamma", &[d], Init::Ones),
            ln1_beta: w(self, "ln1.beta", &[d], Init::Zeros),
            q_weight: w(self, "attn.q.weight", &[d, d], Init::Normal),
            q_bias: w(self, "attn.q.bias", &[d], Init::Zeros),
            k_weight: w(self, "attn.k.weight", &[d, d], Init::Normal),
            k_bias: w(self, "attn.k.bias", &[d], Init::Zeros),
            v_weight: w(self, "attn.v.weight", &[d, d], Init::Normal),
            v_bias: w(self, "attn.v.bias", &[d], Init::Zeros),
            out_weight: w(self, "attn.out.weight", &[d, d], Init::Normal),
            out_bias: w(self, "attn.out.bias", &[d], Init::Zeros),
            ln2_gamma: w(self, "ln2.gamma", &[d], Init::Ones),
            ln2_beta: w(self, "ln2.beta", &[d], Init::Zeros),
            fc1_weight: w(self, "ffn.fc1.weight", &[d, hidden], Init::Normal),
            fc1_bias: w(self, "ffn.fc1.bias", &[hidden], Init::Zeros),
            fc2_weight: w(self, "ffn.fc2.weight", &[hidden, d], Init::Normal),
            fc2_bias: w(self, "ffn.fc2.bias", &[d], Init::Zeros),
        }
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let (d, k, hidden) = (config.embed_dim, config.num_classes, config.ffn_hidden());
        let mut b = Builder {
            names: Vec::new(),
            shapes: Vec::new(),
            inits: Vec::new(),
        };
        let embed_weight = b.add("embed.weight".into(), &[config.patch_dim(), d], Init::Normal);
        let embed_bias = b.add("embed.bias".into(), &[d], Init::Zeros);
        let pos_embed = b.add("pos_embed".into(), &[config.num_tokens(), d], Init::Zeros);
        let blocks = (0..config.num_layers)
            .map(|i| b.block(&format!("layers.{i}"), d, hidden))
            .collect();
        let aux_weight = b.add("aux.weight".into(), &[d, k], Init::Normal);
        let aux_bias = b.add("aux.bias".into(), &[k], Init::Zeros);
        let decoder = match config.decoder_kind {
            DecoderKind::Linear => DecoderSlots::Linear {
                weight: b.add("decoder.weight".into(), &[d, k], Init::Normal),
                bias: b.add("decoder.bias".into(), &[k], Init::Zeros),
            },
            DecoderKind::MaskTransformer => DecoderSlots::Mask {
                class_embed: b.add("decoder.class_embed".into(), &[k, d], Init::Normal),
                blocks: (0..config.mask_decoder_layers)
                    .map(|i| b.block(&format!("decoder.layers.{i}"), d, hidden))
                    .collect(),
            },
        };
        Self {
            names: b.names,
            shapes: b.shapes,
            inits: b.inits,
            embed_weight,
            embed_bias,
            pos_embed,
            blocks,
            aux_weight,
            aux_bias,
            decoder,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, slot: Slot) -> &str {
        &self.names[slot]
    }

    pub fn shape(&self, slot: Slot) -> &[usize] {
        &self.shapes[slot]
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Slots belonging to the main decoder.
    pub fn decoder_slots(&self) -> std::ops::Range<Slot> {
        self.aux_bias + 1..self.len()
    }
}

/// All learnable tensors, stored in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl PartialEq for Layout {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }
}

/// Truncation bound in standard deviations for weight initialization.
const TRUNC: f64 = 2.0;
pub const INIT_STD: f64 = 0.02;

impl ModelParams {
    /// Truncated-normal weights (σ = 0.02), zero biases and positional
    /// embeddings, unit layernorm scales.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = layout
            .shapes
            .iter()
            .zip(&layout.inits)
            .map(|(shape, init)| match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Normal => {
                    let n = shape.iter().product();
                    let data = (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(rng);
                            if v.abs() <= TRUNC * INIT_STD {
                                break v;
                            }
                        })
                        .collect();
                    Tensor::new(shape.clone(), data).expect("shape from layout")
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Builds parameters from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (slot, t) in tensors.iter().enumerate() {
            if t.shape() != layout.shape(slot) {
                return Err(Error::ShapeMismatch {
                    tensor: layout.name(slot).to_string(),
                    expected: layout.shape(slot).to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, slot: Slot) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn get_mut(&mut self, slot: Slot) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a graph leaf (tracked iff `track_grads`).
    pub fn bind(&self, g: &mut Graph, track_grads: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = track_grads;
                g.leaf(t)
            })
            .collect();
        Bound {
            layout: self.layout(),
            vars,
        }
    }
}

/// Parameters registered in a [`Graph`], addressed through their [`Layout`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub layout: Layout,
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, slot: Slot) -> Var {
        self.vars[slot]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
