//! Elementwise ReLU. The subgradient at 0 is defined as 0.

use ndarray::Array4;

use crate::tensor::Scalar;

pub fn relu<A: Scalar>(x: &Array4<A>) -> Array4<A> {
    x.mapv(|v| if v > A::zero() { v } else { A::zero() })
}

pub fn relu_in_place<A: Scalar>(x: &mut Array4<A>) {
    x.mapv_inplace(|v| if v > A::zero() { v } else { A::zero() });
}

/// `grad_x[i] = grad_out[i]` where `x[i] > 0`, else 0.
pub fn relu_backward<A: Scalar>(x: &Array4<A>, grad_out: &Array4<A>) -> Array4<A> {
    assert_eq!(x.dim(), grad_out.dim(), "relu_backward: shape mismatch");
    let mut g = grad_out.clone();
    g.zip_mut_with(x, |gv, &xv| {
        if xv <= A::zero() {
            *gv = A::zero();
        }
    });
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn clamps_negatives_keeps_positives() {
        let x = Array4::from_shape_vec((1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn idempotent_on_random_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Array4::<f64>::from_shape_simple_fn((2, 3, 4, 5), || {
            StandardNormal.sample(&mut rng)
        });
        let once = relu(&x);
        let twice = relu(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn backward_masks_by_input_sign() {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        let g = Array4::from_shape_vec((1, 1, 1, 2), vec![5.0, 5.0]).unwrap();
        let gx = relu_backward(&x, &g);
        assert_eq!(gx.as_slice().unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn subgradient_at_zero_is_zero() {
        let x = Array4::from_shape_vec((1, 1, 1, 1), vec![0.0]).unwrap();
        let g = Array4::from_shape_vec((1, 1, 1, 1), vec![3.0]).unwrap();
        assert_eq!(relu_backward(&x, &g)[[0, 0, 0, 0]], 0.0);
    }
}
