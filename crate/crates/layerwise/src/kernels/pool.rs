//! Spatial pooling: the quadrant-average operator used by every auxiliary
//! head, plus plain 2x2 average/max pooling (alternative downsamplers).

use ndarray::Array4;

use crate::tensor::Scalar;

/// Average each of the four spatial quadrants, producing a `(n, c, 2, 2)`
/// tensor regardless of the input resolution. Requires even `h` and `w`.
/// Summation runs row-major within each quadrant.
pub fn avg_quadrants<A: Scalar>(x: &Array4<A>) -> Array4<A> {
    let (n, c, h, w) = x.dim();
    assert!(
        h % 2 == 0 && w % 2 == 0 && h >= 2 && w >= 2,
        "avg_quadrants: spatial size must be even and >= 2, got {h}x{w}"
    );
    let (qh, qw) = (h / 2, w / 2);
    let inv = A::from_usize(qh * qw).recip();
    let xs = x.as_slice().expect("avg_quadrants: input must be standard layout");
    let mut out = Array4::<A>::zeros((n, c, 2, 2));
    let os = out.as_slice_mut().unwrap();
    for lane in 0..n * c {
        let src = &xs[lane * h * w..(lane + 1) * h * w];
        let mut acc = [A::zero(); 4];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let base = (y / qh) * 2;
            let mut left = A::zero();
            for &v in &row[..qw] {
                left = left + v;
            }
            let mut right = A::zero();
            for &v in &row[qw..] {
                right = right + v;
            }
            acc[base] = acc[base] + left;
            acc[base + 1] = acc[base + 1] + right;
        }
        for (dst, a) in os[lane * 4..(lane + 1) * 4].iter_mut().zip(acc) {
            *dst = a * inv;
        }
    }
    out
}

/// Adjoint of `avg_quadrants`: each input position receives its quadrant's
/// gradient divided by the quadrant area.
pub fn avg_quadrants_backward<A: Scalar>(
    grad_out: &Array4<A>,
    input_hw: (usize, usize),
) -> Array4<A> {
    let (n, c, gh, gw) = grad_out.dim();
    assert_eq!((gh, gw), (2, 2), "avg_quadrants_backward: grad must be 2x2");
    let (h, w) = input_hw;
    let (qh, qw) = (h / 2, w / 2);
    let inv = A::from_usize(qh * qw).recip();
    let gs = grad_out.as_slice().unwrap();
    let mut gx = Array4::<A>::zeros((n, c, h, w));
    let out = gx.as_slice_mut().unwrap();
    for lane in 0..n * c {
        let g = &gs[lane * 4..(lane + 1) * 4];
        let dst = &mut out[lane * h * w..(lane + 1) * h * w];
        for y in 0..h {
            let base = (y / qh) * 2;
            let row = &mut dst[y * w..(y + 1) * w];
            row[..qw].fill(g[base] * inv);
            row[qw..].fill(g[base + 1] * inv);
        }
    }
    gx
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<A: Scalar>(x: &Array4<A>) -> Array4<A> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: spatial size must be even");
    let quarter = A::from_f64(0.25);
    let mut out = Array4::<A>::zeros((n, c, h / 2, w / 2));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let (y, xw) = (oy * 2, ox * 2);
                    out[[s, ch, oy, ox]] = (x[[s, ch, y, xw]]
                        + x[[s, ch, y, xw + 1]]
                        + x[[s, ch, y + 1, xw]]
                        + x[[s, ch, y + 1, xw + 1]])
                        * quarter;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<A: Scalar>(grad_out: &Array4<A>) -> Array4<A> {
    let (n, c, oh, ow) = grad_out.dim();
    let quarter = A::from_f64(0.25);
    let mut gx = Array4::<A>::zeros((n, c, oh * 2, ow * 2));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[[s, ch, oy, ox]] * quarter;
                    let (y, xw) = (oy * 2, ox * 2);
                    gx[[s, ch, y, xw]] = g;
                    gx[[s, ch, y, xw + 1]] = g;
                    gx[[s, ch, y + 1, xw]] = g;
                    gx[[s, ch, y + 1, xw + 1]] = g;
                }
            }
        }
    }
    gx
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and the flat
/// index (0..4, row-major within the window) of each maximum for the
/// backward pass. Ties resolve to the earliest position.
pub fn max_pool2<A: Scalar>(x: &Array4<A>) -> (Array4<A>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: spatial size must be even");
    let mut out = Array4::<A>::zeros((n, c, h / 2, w / 2));
    let mut arg = Array4::<u8>::zeros((n, c, h / 2, w / 2));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let (y, xw) = (oy * 2, ox * 2);
                    let vals = [
                        x[[s, ch, y, xw]],
                        x[[s, ch, y, xw + 1]],
                        x[[s, ch, y + 1, xw]],
                        x[[s, ch, y + 1, xw + 1]],
                    ];
                    let mut best = 0usize;
                    for i in 1..4 {
                        if vals[i] > vals[best] {
                            best = i;
                        }
                    }
                    out[[s, ch, oy, ox]] = vals[best];
                    arg[[s, ch, oy, ox]] = best as u8;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<A: Scalar>(grad_out: &Array4<A>, arg: &Array4<u8>) -> Array4<A> {
    let (n, c, oh, ow) = grad_out.dim();
    assert_eq!(arg.dim(), grad_out.dim());
    let mut gx = Array4::<A>::zeros((n, c, oh * 2, ow * 2));
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = arg[[s, ch, oy, ox]] as usize;
                    let (y, xw) = (oy * 2 + i / 2, ox * 2 + i % 2);
                    gx[[s, ch, y, xw]] = grad_out[[s, ch, oy, ox]];
                }
            }
        }
    }
    gx
}
