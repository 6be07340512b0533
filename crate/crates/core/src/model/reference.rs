//! Loop-level re-implementation of the network used as a test oracle.
//! Shares no code with the graph path beyond parameter storage.

use super::params::{BlockSlots, DecoderSlots, Layout, ModelParams};

type Rows = Vec<Vec<f64>>;

fn affine(x: &Rows, w: &[f64], b: &[f64], fan_out: usize) -> Rows {
    x.iter()
        .map(|row| {
            (0..fan_out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * fan_out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn layernorm(x: &Rows, gamma: &[f64], beta: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let denom = (var + 1e-6).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / denom * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn t(p: &ModelParams, slot: usize) -> &[f64] {
    p.get(slot).data()
}

/// Residual branch `A(x)` of one block, for a single image's tokens.
pub fn block_branch(p: &ModelParams, s: &BlockSlots, heads: usize, x: &Rows) -> Rows {
    let d = x[0].len();
    let dh = d / heads;
    let n = x.len();
    let h = layernorm(x, t(p, s.ln1_gamma), t(p, s.ln1_beta));
    let q = affine(&h, t(p, s.q_weight), t(p, s.q_bias), d);
    let k = affine(&h, t(p, s.k_weight), t(p, s.k_bias), d);
    let v = affine(&h, t(p, s.v_weight), t(p, s.v_bias), d);
    let mut ctx = vec![vec![0.0; d]; n];
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..n {
                let a = scores[j].exp() / z;
                for c in cols.clone() {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    let attn = affine(&ctx, t(p, s.out_weight), t(p, s.out_bias), d);
    let x1: Rows = x.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect()).collect();
    let h2 = layernorm(&x1, t(p, s.ln2_gamma), t(p, s.ln2_beta));
    let hidden = p.get(s.fc1_bias).numel();
    let f = affine(&h2, t(p, s.fc1_weight), t(p, s.fc1_bias), hidden);
    let f: Rows = f.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    let f2 = affine(&f, t(p, s.fc2_weight), t(p, s.fc2_bias), d);
    // A(x) = T(x) - x
    x1.iter()
        .zip(&f2)
        .zip(x)
        .map(|((a, b), x0)| a.iter().zip(b).zip(x0).map(|((u, v), w)| u + v - w).collect())
        .collect()
}

pub fn block(p: &ModelParams, s: &BlockSlots, heads: usize, x: &Rows) -> Rows {
    let a = block_branch(p, s, heads, x);
    x.iter().zip(&a).map(|(u, v)| u.iter().zip(v).map(|(x, y)| x + y).collect()).collect()
}

/// Token embeddings of one `[H, W, 3]` image.
pub fn embed(p: &ModelParams, layout: &Layout, image: &[f64]) -> Rows {
    let c = p.config();
    let (ps, w) = (c.patch_size, c.image_width);
    let d = c.embed_dim;
    let mut out = Vec::new();
    for ty in 0..c.grid_height() {
        for tx in 0..c.grid_width() {
            let mut patch = Vec::new();
            for py in 0..ps {
                for px in 0..ps {
                    for ch in 0..3 {
                        patch.push(image[((ty * ps + py) * w + tx * ps + px) * 3 + ch]);
                    }
                }
            }
            let tok = out.len();
            let mut row = affine(&vec![patch], t(p, layout.embed_weight), t(p, layout.embed_bias), d).remove(0);
            for (j, v) in row.iter_mut().enumerate() {
                *v += t(p, layout.pos_embed)[tok * d + j];
            }
            out.push(row);
        }
    }
    out
}

pub fn decode_tokens(p: &ModelParams, layout: &Layout, x: &Rows) -> Rows {
    let c = p.config();
    match &layout.decoder {
        DecoderSlots::Linear { weight, bias } => affine(x, t(p, *weight), t(p, *bias), c.num_classes),
        DecoderSlots::Mask { class_embed, blocks } => {
            let d = c.embed_dim;
            let mut seq = x.clone();
            seq.extend(t(p, *class_embed).chunks(d).map(<[f64]>::to_vec));
            for b in blocks {
                seq = block(p, b, c.num_heads, &seq);
            }
            let (tokens, classes) = seq.split_at(x.len());
            tokens
                .iter()
                .map(|tok| {
                    classes
                        .iter()
                        .map(|cls| tok.iter().zip(cls).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                        .collect()
                })
                .collect()
        }
    }
}

/// Bilinear upsample (align-corners false) of a `gh×gw` grid of K-vectors.
pub fn upsample(grid: &Rows, gh: usize, gw: usize, out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let k = grid[0].len();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, gh, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, gw, out_w);
            out.push(
                (0..k)
                    .map(|c| {
                        let at = |y: usize, x: usize| grid[y * gw + x][c];
                        let fy = if y1 == y0 { 0.0 } else { fy };
                        let fx = if x1 == x0 { 0.0 } else { fx };
                        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Full unpaused forward for one image; returns `H·W` pixel logit vectors.
pub fn forward(p: &ModelParams, image: &[f64]) -> Vec<Vec<f64>> {
    let layout = p.layout();
    let c = p.config();
    let mut x = embed(p, &layout, image);
    for b in &layout.blocks {
        x = block(p, b, c.num_heads, &x);
    }
    let logits = decode_tokens(p, &layout, &x);
    upsample(&logits, c.grid_height(), c.grid_width(), c.image_height, c.image_width)
}

/// Auxiliary decoder logits for one image's tokens.
pub fn aux(p: &ModelParams, layout: &Layout, x: &Rows) -> Rows {
    affine(x, t(p, layout.aux_weight), t(p, layout.aux_bias), p.config().num_classes)
}

fn entropy(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    -logits
        .iter()
        .map(|v| (v - m).exp() / z)
        .filter(|&q| q >= 1e-30)
        .map(|q| q * q.ln())
        .sum::<f64>()
}

/// Paused forward for one image, tracking original token positions
/// explicitly. `stages` are `(layer, tau)`; with `early_exit` the paused
/// tokens' auxiliary logits are used instead of the main decoder.
pub fn forward_paused(p: &ModelParams, image: &[f64], stages: &[(usize, f64)], early_exit: bool) -> Vec<Vec<f64>> {
    let layout = p.layout();
    let c = p.config();
    let n = c.num_tokens();
    let mut x = embed(p, &layout, image);
    let mut pos: Vec<usize> = (0..n).collect();
    let mut reps: Rows = vec![Vec::new(); n];
    let mut logits: Rows = vec![Vec::new(); n];
    for (li, b) in layout.blocks.iter().enumerate() {
        x = block(p, b, c.num_heads, &x);
        let Some(&(_, tau)) = stages.iter().find(|s| s.0 == li + 1) else {
            continue;
        };
        let a = aux(p, &layout, &x);
        let h: Vec<f64> = a.iter().map(|r| entropy(r)).collect();
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&i, &j| h[i].partial_cmp(&h[j]).unwrap().then(i.cmp(&j)));
        let paused = (tau * x.len() as f64).floor() as usize;
        for &i in &order[..paused] {
            reps[pos[i]] = x[i].clone();
            logits[pos[i]] = a[i].clone();
        }
        let mut keep = order[paused..].to_vec();
        keep.sort();
        x = keep.iter().map(|&i| x[i].clone()).collect();
        pos = keep.iter().map(|&i| pos[i]).collect();
    }
    let token_logits = if early_exit {
        let last = decode_tokens(p, &layout, &x);
        for (i, &q) in pos.iter().enumerate() {
            logits[q] = last[i].clone();
        }
        logits
    } else {
        for (i, &q) in pos.iter().enumerate() {
            reps[q] = x[i].clone();
        }
        decode_tokens(p, &layout, &reps)
    };
    upsample(&token_logits, c.grid_height(), c.grid_width(), c.image_height, c.image_width)
}
