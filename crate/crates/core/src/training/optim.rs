use super::config::{OptimizerKind, TrainConfig};
use crate::model::ModelParams;
use crate::numerics::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;
const POLY_POWER: f64 = 0.9;

/// Rounds to the nearest `f32`, so state survives an `f32` checkpoint exactly.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Per-parameter optimizer moments, flattened in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Adam { m: Vec<f64>, v: Vec<f64> },
    SgdPoly { velocity: Vec<f64> },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
            },
            OptimizerKind::SgdPoly => Self::SgdPoly {
                velocity: vec![0.0; num_params],
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Adam { .. } => OptimizerKind::Adam,
            Self::SgdPoly { .. } => OptimizerKind::SgdPoly,
        }
    }

    /// Applies one update; `step` counts completed updates before this one.
    /// Parameters and moments are kept on the `f32` grid.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[Tensor], step: u64, config: &TrainConfig) {
        let mut offset = 0;
        let t = (step + 1) as i32;
        let lr = config.learning_rate;
        for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
            let n = p.numel();
            let range = offset..offset + n;
            offset += n;
            match self {
                Self::Adam { m, v } => {
                    let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
                    for ((w, &gr), (mi, vi)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m[range.clone()].iter_mut().zip(&mut v[range]))
                    {
                        *mi = quantize(BETA1 * *mi + (1.0 - BETA1) * gr);
                        *vi = quantize(BETA2 * *vi + (1.0 - BETA2) * gr * gr);
                        let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                        *w = quantize(*w - update);
                    }
                }
                Self::SgdPoly { velocity } => {
                    let progress = (step as f64 / config.steps.max(1) as f64).min(1.0);
                    let lr_t = lr * (1.0 - progress).powf(POLY_POWER);
                    for ((w, &gr), u) in p.data_mut().iter_mut().zip(g.data()).zip(&mut velocity[range]) {
                        *u = quantize(MOMENTUM * *u + gr);
                        *w = quantize(*w - lr_t * *u);
                    }
                }
            }
        }
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        match self {
            Self::Adam { m, v } => vec![m, v],
            Self::SgdPoly { velocity } => vec![velocity],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Self::Adam { m, v } => vec![m, v],
            Self::SgdPoly { velocity } => vec![velocity],
        }
    }
}
