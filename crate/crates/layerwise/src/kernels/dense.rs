//! Affine head over flattened features.

use ndarray::{Array1, Array2};

use crate::params::LinearParams;
use crate::tensor::Scalar;

/// `logits = x . W^T + b` for `x` of shape `(n, dim)`.
pub fn linear<A: Scalar>(x: &Array2<A>, p: &LinearParams<A>) -> Array2<A> {
    let (n, dim) = x.dim();
    assert_eq!(
        dim,
        p.in_dim(),
        "linear: input dim {dim} does not match weight dim {}",
        p.in_dim()
    );
    let mut out = Array2::<A>::zeros((n, p.out_dim()));
    ndarray::linalg::general_mat_mul(A::one(), x, &p.weight.t(), A::zero(), &mut out);
    for mut row in out.outer_iter_mut() {
        row.zip_mut_with(&p.bias, |v, &b| *v = *v + b);
    }
    out
}

/// Gradients w.r.t. input, weight and bias.
pub fn linear_backward<A: Scalar>(
    x: &Array2<A>,
    p: &LinearParams<A>,
    grad_out: &Array2<A>,
) -> (Array2<A>, Array2<A>, Array1<A>) {
    let (n, dim) = x.dim();
    assert_eq!(grad_out.dim(), (n, p.out_dim()), "linear_backward: shape mismatch");
    let mut grad_x = Array2::<A>::zeros((n, dim));
    ndarray::linalg::general_mat_mul(A::one(), grad_out, &p.weight, A::zero(), &mut grad_x);
    let mut grad_w = Array2::<A>::zeros(p.weight.raw_dim());
    ndarray::linalg::general_mat_mul(A::one(), &grad_out.t(), x, A::zero(), &mut grad_w);
    let mut grad_b = Array1::<A>::zeros(p.out_dim());
    for row in grad_out.outer_iter() {
        grad_b.zip_mut_with(&row, |g, &v| *g = *g + v);
    }
    (grad_x, grad_w, grad_b)
}
