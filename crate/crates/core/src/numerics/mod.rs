//! Dense `f64` tensors and a taped reverse-mode autodiff graph.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Plain (non-differentiable) matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let k = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        kernels::softmax_row(row);
    }
    out
}
