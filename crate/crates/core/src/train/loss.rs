use crate::error::{contract, Result};
use crate::tensor::DenseTensor;

/// Mean softmax cross-entropy over a `(B, K)` batch and its gradient
/// `(softmax - onehot) / B`.
pub fn cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let &[batch, classes] = logits.shape() else {
        contract!("logits must be (B, K), got {:?}", logits.shape());
    };
    if labels.len() != batch {
        contract!("{} labels for a batch of {batch}", labels.len());
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        contract!("label {l} out of range for {classes} classes");
    }
    let mut grad = vec![0.0; batch * classes];
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        total += log_sum - row[label];
        for (k, (g, z)) in grad[b * classes..(b + 1) * classes].iter_mut().zip(row).enumerate() {
            let p = (z - log_sum).exp();
            *g = (p - if k == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((
        total / batch as f64,
        DenseTensor::from_parts(vec![batch, classes], grad),
    ))
}

/// Index of the largest logit in each row (first one on ties).
pub fn argmax_rows(logits: &DenseTensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &DenseTensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}
