//! Activation and loss functions shared by every model in the pipeline.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Numerically stable softmax of a 1-D tensor (max-subtraction form).
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let out = softmax_slice(logits.data())?;
    Tensor::from_vec(logits.shape(), out)
}

/// Slice form of [`softmax`]; the workhorse used by inner loops.
pub fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty input".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite input".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Cross-entropy of `logits` against a hard `label`.
///
/// Returns the loss and its gradient with respect to the logits,
/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_with_grad(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let (loss, grad) = cross_entropy_with_grad_slice(logits.data(), label)?;
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

pub fn cross_entropy_with_grad_slice(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {} out of range for {} logits",
            label,
            logits.len()
        )));
    }
    let probs = softmax_slice(logits)?;
    let loss = -probs[label].ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

const NORM_EPS: f64 = 1e-12;

/// L2-normalize a vector. Norms at or below 1e-12 return the zero vector
/// with the degenerate flag set instead of dividing by (near) zero.
pub fn l2_normalize(v: &Tensor) -> (Tensor, bool) {
    let (data, degenerate) = l2_normalize_slice(v.data());
    (
        Tensor::from_vec(v.shape(), data).expect("same shape"),
        degenerate,
    )
}

pub fn l2_normalize_slice(v: &[f64]) -> (Vec<f64>, bool) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        (vec![0.0; v.len()], true)
    } else {
        (v.iter().map(|x| x / norm).collect(), false)
    }
}

/// In-place variant writing into `out`, for preallocated hot paths.
pub fn l2_normalize_into(v: &[f64], out: &mut [f64]) -> bool {
    debug_assert_eq!(v.len(), out.len());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= NORM_EPS {
        out.fill(0.0);
        true
    } else {
        for (o, x) in out.iter_mut().zip(v) {
            *o = x / norm;
        }
        false
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Backward of ReLU: zero the gradient wherever the forward output was zero.
pub fn relu_backward_inplace(grad: &mut [f64], forward_out: &[f64]) {
    debug_assert_eq!(grad.len(), forward_out.len());
    for (g, &y) in grad.iter_mut().zip(forward_out) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}
