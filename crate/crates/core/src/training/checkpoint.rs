//! Checkpoint layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 7 | magic `b"PMCKPT\0"` |
//! | 4 | `u32` format version (1) |
//! | 8 + n | `u64` length, then JSON `{"model": ModelConfig, "train": TrainConfig}` |
//! | 8 | `u64` step counter |
//! | 32 + 8 + 16 | RNG seed, `u64` stream, `u128` word position |
//! | 8 + 4·P | `u64` P, then every parameter as `f32`, tensors in canonical order |
//! | 1 + 8 + … | optimizer kind (0 Adam, 1 SGD), `u64` buffer count, each buffer as P `f32` |
//!
//! Canonical order: `embed.weight`, `embed.bias`, `pos_embed`, then for each
//! encoder layer `ln1.{gamma,beta}`, `attn.{q,k,v,out}.{weight,bias}`,
//! `ln2.{gamma,beta}`, `ffn.{fc1,fc2}.{weight,bias}`, then `aux.{weight,bias}`,
//! then the decoder (`decoder.{weight,bias}` or `decoder.class_embed`
//! followed by its blocks in the same per-block order).

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{OptimizerKind, TrainConfig};
use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{Layout, ModelConfig, ModelParams};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 7] = b"PMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Configs {
    model: ModelConfig,
    train: TrainConfig,
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub params: ModelParams,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub optimizer: OptimizerState,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&Configs {
        model: ckpt.params.config().clone(),
        train: ckpt.train_config.clone(),
    })
    .map_err(|e| Error::contract(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.get_seed());
    out.extend_from_slice(&ckpt.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());
    let count = ckpt.params.parameter_count() as u64;
    out.extend_from_slice(&count.to_le_bytes());
    let push_f32 = |out: &mut Vec<u8>, values: &[f64]| {
        for &v in values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    };
    for t in ckpt.params.tensors() {
        push_f32(&mut out, t.data());
    }
    out.push(match ckpt.optimizer.kind() {
        OptimizerKind::Adam => 0,
        OptimizerKind::SgdPoly => 1,
    });
    let buffers = ckpt.optimizer.buffers();
    out.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for b in buffers {
        push_f32(&mut out, b);
    }
    Ok(out)
}

/// Writes atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what} (need {n} bytes at {})", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err(what))?, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }

    fn err(&self, what: &str) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: format!("invalid {what}"),
        }
    }
}

/// Parses a checkpoint. When `expected` is given, its parameter layout must
/// match the stored one; the first differing tensor is named in the error.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic (expected PMCKPT)".into(),
        });
    }
    let version = u32::from_le_bytes(c.array("version")?);
    if version != VERSION {
        return Err(Error::Format {
            offset: 7,
            message: format!("unsupported version {version}"),
        });
    }
    let json_len = c.u64("config length")? as usize;
    let json_at = c.pos;
    let configs: Configs = serde_json::from_slice(c.take(json_len, "config")?).map_err(|e| Error::Format {
        offset: json_at as u64,
        message: format!("config JSON: {e}"),
    })?;
    let model = configs.model;
    model.validate().map_err(|e| Error::Format {
        offset: json_at as u64,
        message: e.to_string(),
    })?;
    if let Some(want) = expected {
        check_layout(&Layout::new(&model), &Layout::new(want))?;
    }
    let step = c.u64("step")?;
    let seed: [u8; 32] = c.array("rng seed")?;
    let stream = c.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(c.array("rng position")?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let layout = Layout::new(&model);
    let count_at = c.pos;
    let count = c.u64("parameter count")? as usize;
    if count != layout.parameter_count() {
        return Err(Error::Format {
            offset: count_at as u64,
            message: format!("parameter count {count} does not match config ({})", layout.parameter_count()),
        });
    }
    let tensors = (0..layout.len())
        .map(|slot| {
            let shape = layout.shape(slot).to_vec();
            let n = shape.iter().product();
            Tensor::new(shape, c.f32s(n, layout.name(slot))?)
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_tensors(&model, tensors)?;

    let kind_at = c.pos;
    let kind = match c.array::<1>("optimizer kind")?[0] {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::SgdPoly,
        k => {
            return Err(Error::Format {
                offset: kind_at as u64,
                message: format!("unknown optimizer kind {k}"),
            })
        }
    };
    let mut optimizer = OptimizerState::new(kind, count);
    let buffers_at = c.pos;
    let nbuf = c.u64("optimizer buffer count")? as usize;
    if nbuf != optimizer.buffers().len() {
        return Err(Error::Format {
            offset: buffers_at as u64,
            message: format!("optimizer buffer count {nbuf}"),
        });
    }
    for b in optimizer.buffers_mut() {
        *b = c.f32s(count, "optimizer state")?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format {
            offset: c.pos as u64,
            message: "trailing bytes".into(),
        });
    }
    Ok(Checkpoint {
        train_config: configs.train,
        params,
        step,
        rng,
        optimizer,
    })
}

fn check_layout(found: &Layout, expected: &Layout) -> Result<()> {
    for slot in 0..found.len().max(expected.len()) {
        let f = (slot < found.len()).then(|| (found.name(slot), found.shape(slot)));
        let e = (slot < expected.len()).then(|| (expected.name(slot), expected.shape(slot)));
        if f != e {
            // a missing tensor shows up as an empty shape
            let name = e.or(f).map(|(n, _)| n.to_string()).unwrap();
            return Err(Error::ShapeMismatch {
                tensor: name,
                expected: e.map_or(vec![], |(_, s)| s.to_vec()),
                found: f.map_or(vec![], |(_, s)| s.to_vec()),
            });
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
