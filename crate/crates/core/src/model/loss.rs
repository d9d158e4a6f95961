use super::tensor::Tensor;
use super::ModelError;

/// Row-wise softmax of `[n, k]` logits with max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot) / n`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor), ModelError> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(ModelError::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(ModelError::Label { label, classes: k });
    }
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (row, &y) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() / n as f64;
        }
        row[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}
