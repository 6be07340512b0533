//! Taped reverse-mode autodiff.
//!
//! Every op appends a node holding its forward value and whatever the
//! backward rule needs. Nodes are appended in execution order, so a reverse
//! sweep over the node list is a valid topological order for backprop.

use super::kernels::{self, gemm, LOG_FLOOR};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<Vec<usize>>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        idx: Vec<Vec<usize>>,
    },
    ConcatTokens {
        a: Var,
        b: Var,
    },
    SliceTokens {
        x: Var,
        start: usize,
    },
    RepeatBatch {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
    Upsample {
        x: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const LN_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor; gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` loss w.r.t. a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let tracked = self.tracked_any(inputs);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, op, tracked))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.make(vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x · w + b` applied to the last axis of `x`; `w` is `[fan_in, fan_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().unwrap();
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let fan_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fan_out] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out = vec![0.0; rows * fan_out];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
        }
        gemm(rows, fan_in, fan_out, self.data(x), false, self.data(w), false, &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.make(
            shape,
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            },
            &inputs,
        )
    }

    /// Batched matmul: `a[G,m,k] · b[G,k,n]`, or `a · bᵀ` with `b[G,n,k]` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; groups * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &da[g * m * k..(g + 1) * m * k],
                false,
                &db[g * k * n..(g + 1) * k * n],
                trans_b,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        self.make(
            vec![groups, m, n],
            out,
            Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.make(self.shape(a).to_vec(), out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.make(self.shape(a).to_vec(), out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.make(self.shape(x).to_vec(), out, Op::Scale { x, c }, &[x])
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape (repeated over the leading axes).
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::Dimension {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: sy.to_vec(),
            });
        }
        let inner = self.value(y).numel();
        let ydata = self.data(y);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, v) in chunk.iter_mut().zip(ydata) {
                *o += v;
            }
        }
        self.make(self.shape(x).to_vec(), out, Op::AddBroadcast { x, y }, &[x, y])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.make(vec![1], vec![s], Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.make(vec![1], vec![s], Op::Mean { x }, &[x])
    }

    /// Layer normalization over the last axis followed by the `gamma`/`beta` affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.data(x);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        let (g, b) = (self.data(gamma), self.data(beta));
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        self.make(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        self.make(self.shape(x).to_vec(), out, Op::Gelu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.value(x).last_dim();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(k) {
            kernels::softmax_row(row);
        }
        self.make(self.shape(x).to_vec(), out, Op::Softmax { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(t, Op::Reshape { x }, tracked))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension {
                op: "permute",
                lhs: shape,
                rhs: perm.to_vec(),
            });
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, perm);
        self.make(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::contract("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    /// Selects rows `idx[b]` from each batch item of `x[B, n, D]`, giving `[B, m, D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (batch, n, d) = self.dims3("gather_rows", x)?;
        let m = check_index_sets(idx, batch, n, false)?;
        let xs = self.data(x);
        let mut out = Vec::with_capacity(batch * m * d);
        for (b, rows) in idx.iter().enumerate() {
            for &r in rows {
                out.extend_from_slice(&xs[(b * n + r) * d..(b * n + r + 1) * d]);
            }
        }
        self.make(
            vec![batch, m, d],
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Copy of `base[B, N, D]` with rows `idx[b]` overwritten by `src[B, m, D]`.
    /// Indices must be distinct per batch item.
    pub fn scatter_rows(&mut self, base: Var, src: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let (batch, n, d) = self.dims3("scatter_rows", base)?;
        let (sb, sm, sd) = self.dims3("scatter_rows", src)?;
        let m = check_index_sets(idx, batch, n, true)?;
        if sb != batch || sd != d || sm != m {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: self.shape(base).to_vec(),
                rhs: self.shape(src).to_vec(),
            });
        }
        let mut out = self.data(base).to_vec();
        let ss = self.data(src);
        for (b, rows) in idx.iter().enumerate() {
            for (j, &r) in rows.iter().enumerate() {
                out[(b * n + r) * d..(b * n + r + 1) * d]
                    .copy_from_slice(&ss[(b * m + j) * d..(b * m + j + 1) * d]);
            }
        }
        self.make(
            vec![batch, n, d],
            out,
            Op::ScatterRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
        )
    }

    /// Concatenates `[B, n, D]` and `[B, m, D]` along the token axis.
    pub fn concat_tokens(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, na, da) = self.dims3("concat_tokens", a)?;
        let (bb, nb, db) = self.dims3("concat_tokens", b)?;
        if ba != bb || da != db {
            return Err(Error::Dimension {
                op: "concat_tokens",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ba * (na + nb) * da);
        for i in 0..ba {
            out.extend_from_slice(&xa[i * na * da..(i + 1) * na * da]);
            out.extend_from_slice(&xb[i * nb * da..(i + 1) * nb * da]);
        }
        self.make(vec![ba, na + nb, da], out, Op::ConcatTokens { a, b }, &[a, b])
    }

    /// Tokens `start..start + len` of `x[B, n, D]`.
    pub fn slice_tokens(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (batch, n, d) = self.dims3("slice_tokens", x)?;
        if len == 0 || start + len > n {
            return Err(Error::Index { index: start + len, len: n });
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(batch * len * d);
        for b in 0..batch {
            out.extend_from_slice(&xs[(b * n + start) * d..(b * n + start + len) * d]);
        }
        self.make(vec![batch, len, d], out, Op::SliceTokens { x, start }, &[x])
    }

    /// Stacks `batch` copies of `x` along a new leading axis.
    pub fn repeat_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.shape(x));
        let out = self.data(x).repeat(batch);
        self.make(shape, out, Op::RepeatBatch { x }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits[P, K])`.
    /// Positions equal to `ignore` are skipped; all-ignored gives 0.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], ignore: Option<usize>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        for &l in labels {
            if l >= k && Some(l) != ignore {
                return Err(Error::InvalidLabel {
                    label: l,
                    num_classes: k,
                });
            }
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0;
        let mut count = 0;
        let floor = LOG_FLOOR.ln();
        for (row, &l) in probs.chunks_exact_mut(k).zip(labels) {
            if Some(l) == ignore {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            let log_prob = row[l] - lse;
            // `max` would swallow a NaN; keep it visible in the loss
            total -= if log_prob.is_nan() { log_prob } else { log_prob.max(floor) };
            kernels::softmax_row(row);
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.make(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Bilinear resize (align-corners false) of `x[B, h, w, C]` to `[B, out_h, out_w, C]`.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "upsample_bilinear",
                lhs: s,
                rhs: vec![out_h, out_w],
            });
        }
        let out = kernels::upsample_bilinear(self.data(x), s[0], s[1], s[2], s[3], out_h, out_w);
        self.make(vec![s[0], out_h, out_w, s[3]], out, Op::Upsample { x }, &[x])
    }

    fn dims3(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [a, b, c] => Ok((a, b, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Backpropagates from a scalar `loss`; afterwards [`Graph::grad`] returns
    /// gradients for every tracked leaf that reaches it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.tracked && matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    gemm(m, n, k, g, false, self.data(b), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, b) {
                    gemm(k, m, n, self.data(a), true, g, false, gb, true);
                }
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                fan_in,
                fan_out,
            } => {
                if let Some(gx) = self.slot(grads, x) {
                    gemm(rows, fan_out, fan_in, g, false, self.data(w), true, gx, true);
                }
                if let Some(gw) = self.slot(grads, w) {
                    gemm(fan_in, rows, fan_out, self.data(x), true, g, false, gw, true);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, b) {
                        for row in g.chunks_exact(fan_out) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            &Op::Bmm {
                a,
                b,
                trans_b,
                groups,
                m,
                k,
                n,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                if let Some(ga) = self.slot(grads, a) {
                    for q in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &g[q * m * n..(q + 1) * m * n],
                            false,
                            &db[q * k * n..(q + 1) * k * n],
                            !trans_b,
                            &mut ga[q * m * k..(q + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let aq = &da[q * m * k..(q + 1) * m * k];
                        let dst = &mut gb[q * k * n..(q + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gq, true, aq, false, dst, true);
                        } else {
                            gemm(k, m, n, aq, true, gq, false, dst, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(gv, g, 1.0);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.slot(grads, a) {
                    for ((acc, gv), bv) in ga.iter_mut().zip(g).zip(self.data(b)) {
                        *acc += gv * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for ((acc, gv), av) in gb.iter_mut().zip(g).zip(self.data(a)) {
                        *acc += gv * av;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, c);
                }
            }
            &Op::AddBroadcast { x, y } => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, 1.0);
                }
                if let Some(gy) = self.slot(grads, y) {
                    let inner = gy.len();
                    for chunk in g.chunks_exact(inner) {
                        axpy(gy, chunk, 1.0);
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).last_dim();
                let gam = self.data(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(d) {
                        axpy(gb, gr, 1.0);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                            mean_dh += dh[j];
                            mean_dh_h += dh[j] * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((acc, gv), xv) in gx.iter_mut().zip(g).zip(self.data(x)) {
                        *acc += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            &Op::Softmax { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    let k = node.value.last_dim();
                    for ((dst, gr), yr) in gx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(out.chunks_exact(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    axpy(gx, g, 1.0);
                }
            }
            Op::Permute { x, perm } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, back) = permute_data(g, node.value.shape(), &inverse);
                    axpy(gx, &back, 1.0);
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let s = self.shape(*x);
                    let (n, d) = (s[1], s[2]);
                    let m = idx.first().map_or(0, Vec::len);
                    for (b, rows) in idx.iter().enumerate() {
                        for (j, &r) in rows.iter().enumerate() {
                            axpy(
                                &mut gx[(b * n + r) * d..(b * n + r + 1) * d],
                                &g[(b * m + j) * d..(b * m + j + 1) * d],
                                1.0,
                            );
                        }
                    }
                }
            }
            Op::ScatterRows { base, src, idx } => {
                let s = node.value.shape();
                let (n, d) = (s[1], s[2]);
                let m = idx.first().map_or(0, Vec::len);
                if let Some(gb) = self.slot(grads, *base) {
                    let mut masked = g.to_vec();
                    for (b, rows) in idx.iter().enumerate() {
                        for &r in rows {
                            masked[(b * n + r) * d..(b * n + r + 1) * d].fill(0.0);
                        }
                    }
                    axpy(gb, &masked, 1.0);
                }
                if let Some(gs) = self.slot(grads, *src) {
                    for (b, rows) in idx.iter().enumerate() {
                        for (j, &r) in rows.iter().enumerate() {
                            axpy(
                                &mut gs[(b * m + j) * d..(b * m + j + 1) * d],
                                &g[(b * n + r) * d..(b * n + r + 1) * d],
                                1.0,
                            );
                        }
                    }
                }
            }
            &Op::ConcatTokens { a, b } => {
                let s = node.value.shape();
                let (batch, total, d) = (s[0], s[1], s[2]);
                let na = self.shape(a)[1];
                let nb = total - na;
                if let Some(ga) = self.slot(grads, a) {
                    for i in 0..batch {
                        axpy(
                            &mut ga[i * na * d..(i + 1) * na * d],
                            &g[i * total * d..(i * total + na) * d],
                            1.0,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for i in 0..batch {
                        axpy(
                            &mut gb[i * nb * d..(i + 1) * nb * d],
                            &g[(i * total + na) * d..(i + 1) * total * d],
                            1.0,
                        );
                    }
                }
            }
            &Op::SliceTokens { x, start } => {
                if let Some(gx) = self.slot(grads, x) {
                    let s = node.value.shape();
                    let (batch, len, d) = (s[0], s[1], s[2]);
                    let n = self.shape(x)[1];
                    for b in 0..batch {
                        axpy(
                            &mut gx[(b * n + start) * d..(b * n + start + len) * d],
                            &g[b * len * d..(b + 1) * len * d],
                            1.0,
                        );
                    }
                }
            }
            &Op::RepeatBatch { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    let inner = gx.len();
                    for chunk in g.chunks_exact(inner) {
                        axpy(gx, chunk, 1.0);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(gl) = self.slot(grads, *logits) {
                    let k = self.value(*logits).last_dim();
                    let s = g[0] / *count as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        if Some(l) == *ignore {
                            continue;
                        }
                        let dst = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            dst[j] += s * probs[r * k + j];
                        }
                        dst[l] -= s;
                    }
                }
            }
            &Op::Upsample { x } => {
                if let Some(gx) = self.slot(grads, x) {
                    let si = self.shape(x);
                    let so = node.value.shape();
                    let back = kernels::upsample_bilinear_adjoint(g, si[0], si[1], si[2], si[3], so[1], so[2]);
                    axpy(gx, &back, 1.0);
                }
            }
        }
    }

    /// Gradient accumulator for `v`, allocated on first use; `None` when `v` is untracked.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn check_index_sets(idx: &[Vec<usize>], batch: usize, n: usize, distinct: bool) -> Result<usize> {
    if idx.len() != batch {
        return Err(Error::contract(format!(
            "expected {batch} index lists, got {}",
            idx.len()
        )));
    }
    let m = idx.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(Error::contract("index lists must be non-empty"));
    }
    let mut seen = vec![false; n];
    for rows in idx {
        if rows.len() != m {
            return Err(Error::contract("index lists must share one length"));
        }
        seen.fill(false);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, len: n });
            }
            if distinct && std::mem::replace(&mut seen[r], true) {
                return Err(Error::contract(format!("duplicate scatter index {r}")));
            }
        }
    }
    Ok(m)
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        for j in 0..inner {
            out.push(data[offset + j * inner_stride]);
        }
        // odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            counter[axis] += 1;
            offset += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
}
