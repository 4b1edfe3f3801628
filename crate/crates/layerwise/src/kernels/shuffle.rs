//! Invertible downsampling: a lossless rearrangement of each 2x2 spatial
//! neighborhood into 4x the channels at half the resolution.
//!
//! Channel order of the four decimated copies is fixed as top-left,
//! top-right, bottom-left, bottom-right, interleaved per input channel:
//! output channel `4*c + q` holds copy `q` of input channel `c`. Checkpoints
//! record this convention as the tag `tl-tr-bl-br-interleaved`.

use ndarray::Array4;

use crate::tensor::Scalar;

pub const CHANNEL_ORDER_TAG: &str = "tl-tr-bl-br-interleaved";

/// The channel-order convention recorded in checkpoint headers.
pub fn invertible_downsample_channel_order() -> &'static str {
    CHANNEL_ORDER_TAG
}

/// `(n, c, h, w) -> (n, 4c, h/2, w/2)`; pure rearrangement, no arithmetic.
pub fn invertible_downsample<A: Scalar>(x: &Array4<A>) -> Array4<A> {
    let (n, c, h, w) = x.dim();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "invertible_downsample: spatial size must be even, got {h}x{w}"
    );
    let mut out = Array4::<A>::zeros((n, 4 * c, h / 2, w / 2));
    for s in 0..n {
        for ch in 0..c {
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                for y in 0..h / 2 {
                    for xw in 0..w / 2 {
                        out[[s, 4 * ch + q, y, xw]] = x[[s, ch, 2 * y + dy, 2 * xw + dx]];
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of `invertible_downsample`.
pub fn invertible_upsample<A: Scalar>(packed: &Array4<A>) -> Array4<A> {
    let (n, c4, hh, hw) = packed.dim();
    assert!(c4 % 4 == 0, "invertible_upsample: channels must be a multiple of 4");
    let c = c4 / 4;
    let mut out = Array4::<A>::zeros((n, c, hh * 2, hw * 2));
    for s in 0..n {
        for ch in 0..c {
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                for y in 0..hh {
                    for xw in 0..hw {
                        out[[s, ch, 2 * y + dy, 2 * xw + dx]] = packed[[s, 4 * ch + q, y, xw]];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn shape_rule_matches_both_input_scales() {
        let x = Array4::<f32>::zeros((1, 3, 224, 224));
        assert_eq!(invertible_downsample(&x).dim(), (1, 12, 112, 112));
        let x = Array4::<f32>::zeros((1, 3, 32, 32));
        assert_eq!(invertible_downsample(&x).dim(), (1, 12, 16, 16));
    }

    #[test]
    fn roundtrip_is_exact_on_random_tensors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = 1 + ({ let v: f64 = StandardNormal.sample(&mut rng); v }.abs() as usize) % 3;
            let x = Array4::<f64>::from_shape_simple_fn((n, 2, 8, 6), || {
                StandardNormal.sample(&mut rng)
            });
            let rt = invertible_upsample(&invertible_downsample(&x));
            assert_eq!(x, rt);
        }
    }

    #[test]
    fn quadrant_layout_is_tl_tr_bl_br() {
        let mut x = Array4::<f64>::zeros((1, 1, 2, 2));
        x[[0, 0, 0, 0]] = 1.0; // TL
        x[[0, 0, 0, 1]] = 2.0; // TR
        x[[0, 0, 1, 0]] = 3.0; // BL
        x[[0, 0, 1, 1]] = 4.0; // BR
        let y = invertible_downsample(&x);
        assert_eq!(y.dim(), (1, 4, 1, 1));
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        assert_eq!(y[[0, 1, 0, 0]], 2.0);
        assert_eq!(y[[0, 2, 0, 0]], 3.0);
        assert_eq!(y[[0, 3, 0, 0]], 4.0);
    }

    #[test]
    #[should_panic(expected = "even")]
    fn odd_input_panics() {
        let x = Array4::<f64>::zeros((1, 1, 5, 4));
        let _ = invertible_downsample(&x);
    }
}
