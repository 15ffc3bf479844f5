//! Eager kernels. The autograd tape calls into these for its forward values,
//! so the tape and the eager API compute bit-identical results.

use super::tensor::Tensor2D;
use crate::error::{CalecError, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x · W (+ bias)`.
pub fn linear(x: &Tensor2D, w: &Tensor2D, bias: Option<&[f64]>) -> Result<Tensor2D> {
    let mut out = x.matmul(w)?;
    if let Some(b) = bias {
        if b.len() != w.cols() {
            return Err(CalecError::Shape(format!(
                "bias of length {} for {} output columns",
                b.len(),
                w.cols()
            )));
        }
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Softmax over the entries where `mask` is true; masked entries are exactly 0.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(CalecError::Shape(format!(
            "{} scores with {} mask entries",
            scores.len(),
            mask.len()
        )));
    }
    let mut out = vec![0.0; scores.len()];
    masked_softmax_into(scores, mask, &mut out).ok_or(CalecError::DegenerateMask { row: 0 })?;
    Ok(out)
}

/// Returns `None` when no entry survives the mask.
pub(crate) fn masked_softmax_into(scores: &[f64], mask: &[bool], out: &mut [f64]) -> Option<()> {
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m { (s - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Some(())
}

/// Row-wise masked softmax of a score matrix. `mask` is row-major, same shape.
pub fn masked_softmax_rows(scores: &Tensor2D, mask: &[bool]) -> Result<Tensor2D> {
    if mask.len() != scores.len() {
        return Err(CalecError::Shape(format!(
            "mask of {} entries for {}x{} scores",
            mask.len(),
            scores.rows(),
            scores.cols()
        )));
    }
    let mut out = Tensor2D::zeros(scores.rows(), scores.cols());
    let c = scores.cols();
    for r in 0..scores.rows() {
        masked_softmax_into(scores.row(r), &mask[r * c..(r + 1) * c], out.row_mut(r))
            .ok_or(CalecError::DegenerateMask { row: r })?;
    }
    Ok(out)
}

/// Scaled dot-product attention. Returns `(weights · V, weights)`.
pub fn attention(
    q: &Tensor2D,
    k: &Tensor2D,
    v: &Tensor2D,
    mask: &[bool],
) -> Result<(Tensor2D, Tensor2D)> {
    if k.rows() != v.rows() {
        return Err(CalecError::Shape(format!("{} keys but {} values", k.rows(), v.rows())));
    }
    let mut scores = q.matmul_t(k)?;
    scores.scale_assign(1.0 / (q.cols() as f64).sqrt());
    let weights = masked_softmax_rows(&scores, mask)?;
    let out = weights.matmul(v)?;
    Ok((out, weights))
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(CalecError::Index { index: target, len: logits.len() });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mask = vec![true; values.len()];
    let mut out = vec![0.0; values.len()];
    masked_softmax_into(values, &mask, &mut out).expect("nonempty input");
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Per-row normalization to zero mean and unit variance (no affine).
pub fn layer_norm_rows(x: &Tensor2D) -> Tensor2D {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
