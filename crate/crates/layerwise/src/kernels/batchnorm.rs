//! Per-channel batch normalization over NCHW tensors.
//!
//! Training mode normalizes with the batch statistics (biased variance) and
//! updates the running statistics; eval mode normalizes with the stored
//! running statistics. Statistics are accumulated sample-major so the result
//! does not depend on thread count.

use ndarray::{Array1, Array4};

use crate::params::BatchNormParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-batch values saved by the training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<A> {
    pub xhat: Array4<A>,
    pub inv_std: Array1<A>,
}

/// Forward pass. In train mode requires a batch of at least 2 samples,
/// updates `running_mean`/`running_var` in place and returns the cache.
pub fn batchnorm_forward<A: Scalar>(
    x: &Array4<A>,
    p: &mut BatchNormParams<A>,
    mode: BnMode,
) -> (Array4<A>, Option<BnCache<A>>) {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, p.channels(), "batchnorm: channel mismatch");
    match mode {
        BnMode::Eval => {
            let mut out = x.clone();
            for ch in 0..c {
                let inv_std = (p.running_var[ch] + p.eps).sqrt().recip();
                let (mean, scale, shift) = (p.running_mean[ch], p.scale[ch], p.shift[ch]);
                out.index_axis_mut(ndarray::Axis(1), ch)
                    .mapv_inplace(|v| (v - mean) * inv_std * scale + shift);
            }
            (out, None)
        }
        BnMode::Train => {
            assert!(n >= 2, "batchnorm: train mode needs a batch of at least 2");
            let m = A::from_usize(n * h * w);
            let unbias = A::from_usize(n * h * w) / A::from_usize(n * h * w - 1);
            let mut xhat = x.clone();
            let mut inv_stds = Array1::<A>::zeros(c);
            for ch in 0..c {
                let lane = x.index_axis(ndarray::Axis(1), ch);
                let mut mean = A::zero();
                for &v in lane.iter() {
                    mean = mean + v;
                }
                mean = mean / m;
                let mut var = A::zero();
                for &v in lane.iter() {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / m;
                let inv_std = (var + p.eps).sqrt().recip();
                inv_stds[ch] = inv_std;
                xhat.index_axis_mut(ndarray::Axis(1), ch)
                    .mapv_inplace(|v| (v - mean) * inv_std);
                let mom = p.momentum;
                p.running_mean[ch] = (A::one() - mom) * p.running_mean[ch] + mom * mean;
                p.running_var[ch] = (A::one() - mom) * p.running_var[ch] + mom * var * unbias;
            }
            let mut out = xhat.clone();
            for ch in 0..c {
                let (scale, shift) = (p.scale[ch], p.shift[ch]);
                out.index_axis_mut(ndarray::Axis(1), ch)
                    .mapv_inplace(|v| v * scale + shift);
            }
            (
                out,
                Some(BnCache {
                    xhat,
                    inv_std: inv_stds,
                }),
            )
        }
    }
}

/// Training-mode backward. Returns `(grad_x, grad_scale, grad_shift)`.
pub fn batchnorm_backward<A: Scalar>(
    p: &BatchNormParams<A>,
    cache: &BnCache<A>,
    grad_out: &Array4<A>,
) -> (Array4<A>, Array1<A>, Array1<A>) {
    let (n, c, h, w) = grad_out.dim();
    assert_eq!(cache.xhat.dim(), grad_out.dim(), "batchnorm_backward: shape mismatch");
    let m = A::from_usize(n * h * w);
    let mut grad_scale = Array1::<A>::zeros(c);
    let mut grad_shift = Array1::<A>::zeros(c);
    for ch in 0..c {
        let g = grad_out.index_axis(ndarray::Axis(1), ch);
        let xh = cache.xhat.index_axis(ndarray::Axis(1), ch);
        let mut ds = A::zero();
        let mut db = A::zero();
        for (&gv, &xv) in g.iter().zip(xh.iter()) {
            ds = ds + gv * xv;
            db = db + gv;
        }
        grad_scale[ch] = ds;
        grad_shift[ch] = db;
    }
    // dx = (scale * inv_std / m) * (m*dy - dshift - xhat*dscale)
    let mut grad_x = grad_out.clone();
    for ch in 0..c {
        let coeff = p.scale[ch] * cache.inv_std[ch] / m;
        let (ds, db) = (grad_scale[ch], grad_shift[ch]);
        let xh = cache.xhat.index_axis(ndarray::Axis(1), ch);
        let mut gx = grad_x.index_axis_mut(ndarray::Axis(1), ch);
        ndarray::Zip::from(&mut gx).and(&xh).for_each(|gv, &xv| {
            *gv = coeff * (m * *gv - db - xv * ds);
        });
    }
    (grad_x, grad_scale, grad_shift)
}
