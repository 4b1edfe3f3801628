//! 3x3 convolution, forward and hand-derived backward.
//!
//! The implementation lowers each sample to a column matrix (`im2col`) and
//! multiplies with the flattened kernel, so the heavy lifting is a dense
//! matrix product. The backward pass reuses the same lowering: the kernel
//! gradient is `grad_out . col^T`, the input gradient scatters
//! `kernel^T . grad_out` back through `col2im`.
//!
//! Determinism: samples are processed in fixed-size chunks (`PAR_CHUNKS`,
//! independent of thread count), every per-element summation order is fixed,
//! and chunk partials are reduced in chunk order. Two runs over the same
//! inputs produce bit-identical results.

use ndarray::{Array1, Array2, Array4, ArrayView4, ArrayViewMut4, Axis};
use rayon::prelude::*;

use crate::params::ConvParams;
use crate::tensor::Scalar;

const KSIZE: usize = 3;
/// Fixed sample-chunk count for intra-kernel parallelism.
const PAR_CHUNKS: usize = 4;

/// Output spatial size for one dimension.
pub fn conv_out_len(len: usize, pad: usize, stride: usize) -> usize {
    (len + 2 * pad - KSIZE) / stride + 1
}

/// 2-D convolution over an NCHW batch. Panics on channel mismatch or
/// non-finite input; use `pad=1, stride=1` for size-preserving blocks.
pub fn conv2d<A: Scalar>(x: &Array4<A>, p: &ConvParams<A>, pad: usize, stride: usize) -> Array4<A> {
    let (n, c_in, h, w) = x.dim();
    assert_eq!(
        c_in,
        p.c_in(),
        "conv2d: input has {} channels but kernel expects {}",
        c_in,
        p.c_in()
    );
    assert!(h + 2 * pad >= KSIZE && w + 2 * pad >= KSIZE, "conv2d: input too small");
    debug_assert!(crate::tensor::all_finite(x), "conv2d: non-finite input");

    let (oh, ow) = (conv_out_len(h, pad, stride), conv_out_len(w, pad, stride));
    let c_out = p.c_out();
    let mut out = Array4::<A>::zeros((n, c_out, oh, ow));

    let w_mat = kernel_matrix(p);
    let chunk = n.div_ceil(PAR_CHUNKS).max(1);
    let out_chunks: Vec<ArrayViewMut4<A>> = out.axis_chunks_iter_mut(Axis(0), chunk).collect();
    let in_chunks: Vec<ArrayView4<A>> = x.axis_chunks_iter(Axis(0), chunk).collect();

    out_chunks
        .into_par_iter()
        .zip(in_chunks)
        .for_each(|(mut out_c, in_c)| {
            let mut col = Array2::<A>::zeros((c_in * KSIZE * KSIZE, oh * ow));
            for s in 0..in_c.shape()[0] {
                im2col(&in_c, s, pad, stride, &mut col);
                let mut out_s = out_c
                    .index_axis_mut(Axis(0), s)
                    .into_shape((c_out, oh * ow))
                    .unwrap();
                ndarray::linalg::general_mat_mul(A::one(), &w_mat, &col, A::zero(), &mut out_s);
                for (c, mut row) in out_s.outer_iter_mut().enumerate() {
                    let b = p.bias[c];
                    row.mapv_inplace(|v| v + b);
                }
            }
        });
    out
}

/// Gradients w.r.t. input, kernel and bias for a `conv2d` call.
/// `grad_bias` is the per-output-channel sum of `grad_out`.
pub fn conv2d_backward<A: Scalar>(
    x: &Array4<A>,
    p: &ConvParams<A>,
    grad_out: &Array4<A>,
    pad: usize,
    stride: usize,
) -> (Array4<A>, Array4<A>, Array1<A>) {
    let (gx, gk, gb) = backward_impl(x, p, grad_out, pad, stride, true);
    (gx.unwrap(), gk, gb)
}

/// Kernel/bias gradients only; skips the input gradient (the input to a
/// block under greedy training is frozen, so its gradient is never used).
pub fn conv2d_backward_params<A: Scalar>(
    x: &Array4<A>,
    p: &ConvParams<A>,
    grad_out: &Array4<A>,
    pad: usize,
    stride: usize,
) -> (Array4<A>, Array1<A>) {
    let (_, gk, gb) = backward_impl(x, p, grad_out, pad, stride, false);
    (gk, gb)
}

fn backward_impl<A: Scalar>(
    x: &Array4<A>,
    p: &ConvParams<A>,
    grad_out: &Array4<A>,
    pad: usize,
    stride: usize,
    need_grad_x: bool,
) -> (Option<Array4<A>>, Array4<A>, Array1<A>) {
    let (n, c_in, h, w) = x.dim();
    let (gn, c_out, oh, ow) = grad_out.dim();
    assert_eq!(n, gn, "conv2d_backward: batch mismatch");
    assert_eq!(c_in, p.c_in(), "conv2d_backward: channel mismatch");
    assert_eq!(c_out, p.c_out(), "conv2d_backward: output channel mismatch");
    assert_eq!(
        (oh, ow),
        (conv_out_len(h, pad, stride), conv_out_len(w, pad, stride)),
        "conv2d_backward: grad_out spatial shape inconsistent with forward"
    );

    let w_mat = kernel_matrix(p);
    let kdim = c_in * KSIZE * KSIZE;
    let chunk = n.div_ceil(PAR_CHUNKS).max(1);

    let mut grad_x = need_grad_x.then(|| Array4::<A>::zeros((n, c_in, h, w)));
    let gx_chunks: Vec<Option<ArrayViewMut4<A>>> = match grad_x.as_mut() {
        Some(gx) => gx.axis_chunks_iter_mut(Axis(0), chunk).map(Some).collect(),
        None => (0..n.div_ceil(chunk)).map(|_| None).collect(),
    };
    let in_chunks: Vec<ArrayView4<A>> = x.axis_chunks_iter(Axis(0), chunk).collect();
    let go_chunks: Vec<ArrayView4<A>> = grad_out.axis_chunks_iter(Axis(0), chunk).collect();

    // One (grad_kernel, grad_bias) partial per chunk, reduced in chunk order.
    let partials: Vec<(Array2<A>, Array1<A>)> = gx_chunks
        .into_par_iter()
        .zip(in_chunks.into_par_iter().zip(go_chunks))
        .map(|(mut gx_c, (in_c, go_c))| {
            let mut col = Array2::<A>::zeros((kdim, oh * ow));
            let mut gcol = Array2::<A>::zeros((kdim, oh * ow));
            let mut gk = Array2::<A>::zeros((c_out, kdim));
            let mut gb = Array1::<A>::zeros(c_out);
            for s in 0..in_c.shape()[0] {
                let go_s = go_c
                    .index_axis(Axis(0), s)
                    .into_shape((c_out, oh * ow))
                    .unwrap();
                im2col(&in_c, s, pad, stride, &mut col);
                ndarray::linalg::general_mat_mul(A::one(), &go_s, &col.t(), A::one(), &mut gk);
                for (c, row) in go_s.outer_iter().enumerate() {
                    let mut acc = A::zero();
                    for &v in row {
                        acc = acc + v;
                    }
                    gb[c] = gb[c] + acc;
                }
                if let Some(gx_c) = gx_c.as_mut() {
                    ndarray::linalg::general_mat_mul(
                        A::one(),
                        &w_mat.t(),
                        &go_s,
                        A::zero(),
                        &mut gcol.view_mut(),
                    );
                    col2im(&gcol, gx_c, s, pad, stride);
                }
            }
            (gk, gb)
        })
        .collect();

    let mut grad_kernel = Array2::<A>::zeros((c_out, kdim));
    let mut grad_bias = Array1::<A>::zeros(c_out);
    for (gk, gb) in partials {
        grad_kernel.zip_mut_with(&gk, |a, &b| *a = *a + b);
        grad_bias.zip_mut_with(&gb, |a, &b| *a = *a + b);
    }
    let grad_kernel = grad_kernel
        .into_shape((c_out, c_in, KSIZE, KSIZE))
        .unwrap();
    (grad_x, grad_kernel, grad_bias)
}

/// Kernel flattened to `(c_out, c_in*9)`, matching the im2col row order.
fn kernel_matrix<'a, A: Scalar>(p: &'a ConvParams<A>) -> ndarray::ArrayView2<'a, A> {
    let c_out = p.c_out();
    let kdim = p.c_in() * KSIZE * KSIZE;
    p.kernel.view().into_shape((c_out, kdim)).unwrap()
}

/// Lower one sample to columns: `col[(c*3+ky)*3+kx, oy*ow+ox] = x[s, c, iy, ix]`
/// with `iy = oy*stride + ky - pad`, zero outside the input.
fn im2col<A: Scalar>(
    x: &ArrayView4<A>,
    s: usize,
    pad: usize,
    stride: usize,
    col: &mut Array2<A>,
) {
    let (_, c_in, h, w) = x.dim();
    let (oh, ow) = (conv_out_len(h, pad, stride), conv_out_len(w, pad, stride));
    let xs = x.index_axis(Axis(0), s);
    let xs = xs.as_slice().expect("im2col: input must be standard layout");
    let cols = col.as_slice_mut().unwrap();

    for c in 0..c_in {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row_base + oy * ow..row_base + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(A::zero());
                        continue;
                    }
                    let shift = kx as isize - pad as isize; // ix = ox*stride + shift
                    let ox_min = if shift >= 0 {
                        0
                    } else {
                        ((-shift) as usize).div_ceil(stride)
                    };
                    let ox_end = (((w as isize - 1 - shift) / stride as isize) + 1)
                        .clamp(0, ow as isize) as usize;
                    dst[..ox_min.min(ow)].fill(A::zero());
                    if ox_end < ow {
                        dst[ox_end..].fill(A::zero());
                    }
                    if ox_min >= ox_end {
                        continue;
                    }
                    let src_base = (c * h + iy as usize) * w;
                    if stride == 1 {
                        let ix0 = (ox_min as isize + shift) as usize;
                        dst[ox_min..ox_end]
                            .copy_from_slice(&xs[src_base + ix0..src_base + ix0 + (ox_end - ox_min)]);
                    } else {
                        for ox in ox_min..ox_end {
                            let ix = (ox as isize * stride as isize + shift) as usize;
                            dst[ox] = xs[src_base + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into the input gradient.
fn col2im<A: Scalar>(
    gcol: &Array2<A>,
    gx: &mut ArrayViewMut4<A>,
    s: usize,
    pad: usize,
    stride: usize,
) {
    let (_, c_in, h, w) = gx.dim();
    let (oh, ow) = (conv_out_len(h, pad, stride), conv_out_len(w, pad, stride));
    let mut gxs = gx.index_axis_mut(Axis(0), s);
    let gxs = gxs
        .as_slice_mut()
        .expect("col2im: gradient must be standard layout");
    let cols = gcol.as_slice().unwrap();

    for c in 0..c_in {
        for ky in 0..KSIZE {
            for kx in 0..KSIZE {
                let row = (c * KSIZE + ky) * KSIZE + kx;
                let row_base = row * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let shift = kx as isize - pad as isize;
                    let ox_min = if shift >= 0 {
                        0
                    } else {
                        ((-shift) as usize).div_ceil(stride)
                    };
                    let ox_end = (((w as isize - 1 - shift) / stride as isize) + 1)
                        .clamp(0, ow as isize) as usize;
                    if ox_min >= ox_end {
                        continue;
                    }
                    let src = &cols[row_base + oy * ow..row_base + (oy + 1) * ow];
                    let dst_base = (c * h + iy as usize) * w;
                    for ox in ox_min..ox_end {
                        let ix = (ox as isize * stride as isize + shift) as usize;
                        gxs[dst_base + ix] = gxs[dst_base + ix] + src[ox];
                    }
                }
            }
        }
    }
}
