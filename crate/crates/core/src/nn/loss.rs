use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

fn check(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let [n, k] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent labels",
            expected: alloc::vec![n],
            actual: alloc::vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok((n, k))
}

/// Numerically stable row-wise softmax of `[N, K]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [_, k] = logits.dims2()?;
    let mut probs = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| libm::exp(v as f64 - max)).sum();
        probs.extend(row.iter().map(|&v| (libm::exp(v as f64 - max) / sum) as f32));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), probs))
}

/// Row-wise softmax and mean cross-entropy against class indices.
///
/// Returns `(loss, probs)`; the loss is kept in `f64`. Each row is shifted by its maximum before
/// exponentiating, so large logits do not overflow.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = check(logits, labels)?;
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| libm::exp(v as f64 - max)).sum();
        total += libm::log(sum) - (row[label] as f64 - max);
    }
    Ok((total / n as f64, softmax(logits)?))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(probs - onehot(labels)) / N`.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = check(probs, labels)?;
    let scale = 1.0 / n as f32;
    let mut grad: Vec<f32> = probs.data().iter().map(|&p| p * scale).collect();
    for (i, &label) in labels.iter().enumerate() {
        grad[i * k + label] -= scale;
    }
    Ok(Tensor::from_parts(probs.shape().to_vec(), grad))
}
