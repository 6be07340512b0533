//! Raw slice kernels shared by the graph ops and the model's no-grad paths.

/// `c (+)= op(a) · op(b)` for row-major slices, where `op` optionally transposes.
///
/// With `trans_a`, `a` is stored `k×m`; with `trans_b`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths are asserted above and the strides address exactly
    // the m×k, k×n and m×n row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place max-subtracted softmax over one row. NaN inputs propagate so
/// callers can detect them in the loss.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Floor applied before logarithms in entropy and cross-entropy paths.
pub const LOG_FLOOR: f64 = 1e-30;

/// Per-axis linear interpolation taps for bilinear resizing with
/// `align_corners = false`: output index `o` reads `w0·in[i0] + w1·in[i1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

pub fn interpolation_taps(in_size: usize, out_size: usize) -> Vec<Taps> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Taps {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of `[batch, h, w, channels]` to `[batch, out_h, out_w, channels]`.
pub fn upsample_bilinear(
    input: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let rows = interpolation_taps(h, out_h);
    let cols = interpolation_taps(w, out_w);
    let mut out = vec![0.0; batch * out_h * out_w * channels];
    for b in 0..batch {
        let src = &input[b * h * w * channels..(b + 1) * h * w * channels];
        let dst = &mut out[b * out_h * out_w * channels..(b + 1) * out_h * out_w * channels];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let o = &mut dst[(oy * out_w + ox) * channels..(oy * out_w + ox + 1) * channels];
                for (y, wy) in [(ry.i0, ry.w0), (ry.i1, ry.w1)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (x, wx) in [(rx.i0, rx.w0), (rx.i1, rx.w1)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let s = &src[(y * w + x) * channels..(y * w + x + 1) * channels];
                        for (d, v) in o.iter_mut().zip(s) {
                            *d += wgt * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_bilinear`]: scatters output gradients back onto the input grid.
pub fn upsample_bilinear_adjoint(
    grad_out: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let rows = interpolation_taps(h, out_h);
    let cols = interpolation_taps(w, out_w);
    let mut grad_in = vec![0.0; batch * h * w * channels];
    for b in 0..batch {
        let g = &grad_out[b * out_h * out_w * channels..(b + 1) * out_h * out_w * channels];
        let dst = &mut grad_in[b * h * w * channels..(b + 1) * h * w * channels];
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let go = &g[(oy * out_w + ox) * channels..(oy * out_w + ox + 1) * channels];
                for (y, wy) in [(ry.i0, ry.w0), (ry.i1, ry.w1)] {
                    if wy == 0.0 {
                        continue;
                    }
                    for (x, wx) in [(rx.i0, rx.w0), (rx.i1, rx.w1)] {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let d = &mut dst[(y * w + x) * channels..(y * w + x + 1) * channels];
                        for (dv, gv) in d.iter_mut().zip(go) {
                            *dv += wgt * gv;
                        }
                    }
                }
            }
        }
    }
    grad_in
}
