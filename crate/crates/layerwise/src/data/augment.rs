//! Training-time augmentation: zero-pad by 4, random crop back to the
//! original size, then horizontal flip with probability 1/2. Deterministic
//! given the RNG state.

use ndarray::Array4;
use rand::Rng;

/// Augment a batch of (already normalized) images. Output shape equals the
/// input shape.
pub fn augment_batch<R: Rng>(images: &Array4<f32>, rng: &mut R) -> Array4<f32> {
    let (n, c, h, w) = images.dim();
    let pad = 4usize;
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for s in 0..n {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue; // stays zero (padding region)
                }
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[[s, ch, y, x]] = images[[s, ch, sy as usize, sx as usize]];
                }
            }
        }
    }
    out
}
