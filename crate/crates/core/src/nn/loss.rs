use crate::error::{Error, Result};

/// Cross-entropy of `softmax(logits)` against `label`, with its logit gradient
/// `softmax(logits) - onehot(label)`. Evaluated in f64 with max subtraction.
pub fn softmax_cross_entropy(logits: &[f32], label: usize) -> Result<(f32, Vec<f32>)> {
    if label >= logits.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - f64::from(logits[label]);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(c, &e)| {
            let p = e / sum;
            (if c == label { p - 1.0 } else { p }) as f32
        })
        .collect();
    Ok((loss as f32, grad))
}
