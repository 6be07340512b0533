use crate::numerics::kernels::{softmax_row, LOG_FLOOR};
use crate::numerics::Tensor;

/// Shannon entropy (nats) of `softmax(logits)` for one token.
/// Probabilities below the log floor contribute nothing. Rounding is
/// clamped away so the result always lies in `[0, ln K]`.
pub fn entropy_of_logits(logits: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend_from_slice(logits);
    softmax_row(scratch);
    let h = -scratch
        .iter()
        .filter(|&&p| p >= LOG_FLOOR)
        .map(|&p| p * p.ln())
        .sum::<f64>();
    // NaN passes through untouched
    if h.is_nan() {
        h
    } else {
        h.clamp(0.0, (logits.len().max(1) as f64).ln())
    }
}

/// Per-token entropy of `[B, n, K]` logits, returned as a `[B, n]` tensor.
pub fn token_entropy(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let k = logits.last_dim();
    let lead: Vec<usize> = s[..s.len() - 1].to_vec();
    let mut scratch = Vec::with_capacity(k);
    let data = logits
        .data()
        .chunks_exact(k)
        .map(|row| entropy_of_logits(row, &mut scratch))
        .collect();
    Tensor::new(lead, data).expect("leading shape of a valid tensor")
}
