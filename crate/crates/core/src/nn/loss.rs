use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub probs: Tensor,
    /// `d loss / d logits = p - onehot(target)`
    pub grad: Tensor,
}

/// Numerically stable softmax over a flat tensor.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax followed by `-ln p[target]`, computed via log-sum-exp so large
/// logits neither overflow nor produce an infinite loss.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<CrossEntropy> {
    let z = logits.data();
    if target >= z.len() {
        return Err(Error::invalid(format!(
            "target class {target} out of range for {} logits",
            z.len()
        )));
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - z[target];
    let probs = softmax(z);
    let mut grad = probs.clone();
    grad[target] -= 1.0;
    Ok(CrossEntropy {
        loss,
        probs: Tensor::from_vec(probs),
        grad: Tensor::new(logits.shape(), grad)?,
    })
}
