//! Central-finite-difference gradient verification.
//!
//! Every backward kernel in this crate is checked against this oracle at
//! `f64`. The relative error for one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`. The floor
//! matters for directions whose true gradient is exactly zero (batch norm
//! makes the preceding bias such a direction): central differences return
//! only roundoff there (about `|f| * 1e-16 / eps`), so below the floor the
//! comparison is an absolute one at the resolution limit of the method.
//! Probe points must stay away from ReLU kinks by a margin larger than
//! `eps`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for the relative error; see the module docs.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Maximum relative error between `analytic` and central finite differences
/// of `f` over all coordinates of `x`.
pub fn grad_check<F>(x: &mut [f64], analytic: &[f64], f: F, eps: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(x, analytic, f, eps, &coords)
}

/// Like [`grad_check`] but probes at most `max_coords` coordinates, sampled
/// deterministically from `seed`. Large tensors are spot-checked this way.
pub fn grad_check_sampled<F>(
    x: &mut [f64],
    analytic: &[f64],
    f: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut coords: Vec<usize> = (0..x.len()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        coords.sort_unstable();
    }
    grad_check_coords(x, analytic, f, eps, &coords)
}

fn grad_check_coords<F>(
    x: &mut [f64],
    analytic: &[f64],
    mut f: F,
    eps: f64,
    coords: &[usize],
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "grad_check: gradient length mismatch");
    let mut max_rel = 0.0_f64;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(x);
        x[i] = orig - eps;
        let fm = f(x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        // f(x) = c . x
        let c = [0.7, -1.3, 2.1, 0.05];
        let mut x = vec![0.3, -0.8, 1.5, 2.0];
        let analytic = c.to_vec();
        let err = grad_check(&mut x, &analytic, |x| {
            x.iter().zip(c.iter()).map(|(a, b)| a * b).sum()
        }, DEFAULT_EPS);
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let mut x = vec![-0.5, 0.4, 1.2, -1.1];
        let analytic: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let err = grad_check(&mut x, &analytic, |x| {
            x.iter().map(|&v| v.max(0.0)).sum()
        }, DEFAULT_EPS);
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut x = vec![1.0, 2.0];
        let analytic = vec![2.0, 4.5]; // true grad of x0^2 + x1^2 is (2, 4)
        let err = grad_check(&mut x, &analytic, |x| x[0] * x[0] + x[1] * x[1], DEFAULT_EPS);
        assert!(err > 1e-2, "should flag the wrong coordinate, got {err}");
    }

    #[test]
    fn sampled_check_covers_a_subset() {
        let mut x = vec![0.1; 1000];
        let analytic = vec![1.0; 1000];
        let err = grad_check_sampled(&mut x, &analytic, |x| x.iter().sum(), DEFAULT_EPS, 50, 0);
        assert!(err < 1e-8);
    }
}
