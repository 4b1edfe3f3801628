//! Softmax cross-entropy over class logits.

use ndarray::Array2;

use crate::tensor::Scalar;

/// Mean cross-entropy loss and its gradient w.r.t. the logits:
/// `grad = (softmax - onehot) / n`. Uses the log-sum-exp trick.
pub fn softmax_cross_entropy<A: Scalar>(logits: &Array2<A>, labels: &[usize]) -> (A, Array2<A>) {
    let (n, classes) = logits.dim();
    assert_eq!(labels.len(), n, "softmax_cross_entropy: label count mismatch");
    let inv_n = A::from_usize(n).recip();
    let mut grad = softmax_probs(logits);
    let mut loss = A::zero();
    for (i, &label) in labels.iter().enumerate() {
        assert!(
            label < classes,
            "softmax_cross_entropy: label {label} out of range for {classes} classes"
        );
        let p = grad[[i, label]];
        // p > 0 always: softmax of finite logits.
        loss = loss - p.ln();
        grad[[i, label]] = grad[[i, label]] - A::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    (loss * inv_n, grad)
}

/// Row-wise softmax probabilities.
pub fn softmax_probs<A: Scalar>(logits: &Array2<A>) -> Array2<A> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(A::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = A::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}
