//! Empirical verification of the training procedure's structural claims,
//! decoupled from real datasets.
//!
//! Two checks live here. The first replays a trained network's recorded
//! per-layer train risks and asserts they never increase across layers where
//! the identity warm start applied. The second simulates a cascade of
//! 1-Lipschitz layers solved to per-layer accuracy `eps` and verifies the
//! closed-form deviation bound
//! `||x*_j - x^_j|| <= eps * (j(j-1)/2 * B + j * ||x|| + j)`
//! at every depth of every trial, along with the fitted growth exponent of
//! the deviation in the depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::GreedyNet;

// ---------------------------------------------------------------------------
// Progressive improvement over recorded risks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRiskEntry {
    pub layer: usize,
    pub train_risk: f64,
    /// Whether the non-increase assertion applies (identity warm start ran).
    pub applicable: bool,
    /// Set when applicable and the risk exceeded the previous layer's.
    pub violation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop1Report {
    pub entries: Vec<LayerRiskEntry>,
    pub violations: usize,
}

impl Prop1Report {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Walk the recorded per-layer train risks; on every layer that was
/// warm-started from the identity candidate the risk must not exceed the
/// previous layer's. Downsampled or otherwise incompatible layers are
/// marked not applicable rather than asserted.
pub fn check_progressive_improvement(net: &GreedyNet) -> Prop1Report {
    let mut entries = Vec::with_capacity(net.results.len());
    let mut violations = 0;
    for (j, r) in net.results.iter().enumerate() {
        let applicable = j > 0 && r.identity_init;
        let violation = applicable && r.train_risk > net.results[j - 1].train_risk;
        if violation {
            violations += 1;
        }
        entries.push(LayerRiskEntry {
            layer: j,
            train_risk: r.train_risk,
            applicable,
            violation,
        });
    }
    Prop1Report {
        entries,
        violations,
    }
}

// ---------------------------------------------------------------------------
// Error cascade simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeSimConfig {
    /// Cascade depth J.
    pub depth: usize,
    /// Vector dimension d.
    pub dim: usize,
    /// Uniform bias norm bound B.
    pub bias_bound: f64,
    /// Per-layer approximation error.
    pub eps: f64,
    pub trials: usize,
    pub seed: u64,
    /// Align each perturbation with the current deviation instead of a
    /// random direction (stresses the bound).
    pub worst_case: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeTrial {
    /// `||x*_j - x^_j||` for j = 1..=J.
    pub deviations: Vec<f64>,
    /// Closed-form bound at each depth.
    pub bounds: Vec<f64>,
    pub input_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Report {
    pub config: CascadeSimConfig,
    pub trials: Vec<CascadeTrial>,
    /// Count of (trial, depth) pairs exceeding the closed-form bound.
    pub violations: usize,
    /// Mean deviation at the final depth.
    pub mean_final_deviation: f64,
}

impl Prop2Report {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Closed-form deviation bound at depth `j`.
pub fn cascade_bound(eps: f64, bias_bound: f64, input_norm: f64, j: usize) -> f64 {
    let jf = j as f64;
    eps * (jf * (jf - 1.0) / 2.0 * bias_bound + jf * input_norm + jf)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn matvec(m: &[f64], x: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, row) in m.chunks_exact(d).enumerate() {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[i] = acc;
    }
    out
}

fn relu_vec(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Top singular value by power iteration on `M^T M`.
fn top_singular_value(m: &[f64], d: usize, rng: &mut ChaCha8Rng) -> f64 {
    let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mt: Vec<f64> = {
        let mut t = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                t[j * d + i] = m[i * d + j];
            }
        }
        t
    };
    let mut sigma = 0.0;
    for _ in 0..50 {
        let mv = matvec(m, &v, d);
        let mut w = matvec(&mt, &mv, d);
        let nw = norm(&w);
        if nw == 0.0 {
            return 0.0;
        }
        for x in w.iter_mut() {
            *x /= nw;
        }
        let new_sigma = norm(&matvec(m, &w, d));
        let done = (new_sigma - sigma).abs() < 1e-10;
        sigma = new_sigma;
        v = w;
        if done {
            break;
        }
    }
    sigma
}

/// Random Gaussian matrix normalized by its top singular value; resampled
/// if an independent re-estimate finds spectral norm above `1 + 1e-9`.
fn sample_contractive_matrix(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let mut m: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
        let sigma = top_singular_value(&m, d, rng);
        if sigma == 0.0 {
            continue;
        }
        for v in m.iter_mut() {
            *v /= sigma;
        }
        let check = top_singular_value(&m, d, rng);
        if check <= 1.0 + 1e-9 {
            return m;
        }
    }
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Run the cascade simulation. Every trial builds a reference cascade
/// `x*_{j+1} = relu(W_j x*_j + b_j)` from contractive operators with biases
/// of norm `B`, and a perturbed cascade where each pre-activation receives
/// an additional error of magnitude at most `eps * (1 + ||x*_j||)`.
pub fn simulate_error_propagation(cfg: &CascadeSimConfig) -> Result<Prop2Report> {
    if cfg.depth == 0 {
        return Err(Error::Config("cascade depth must be at least 1".into()));
    }
    let d = cfg.dim;
    let mut trials = Vec::with_capacity(cfg.trials);
    let mut violations = 0usize;
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(trial as u64));
        let x0 = random_unit(d, &mut rng);
        let input_norm = norm(&x0);

        let mut x_star = x0.clone();
        let mut x_hat = x0.clone();
        let mut deviations = Vec::with_capacity(cfg.depth);
        let mut bounds = Vec::with_capacity(cfg.depth);
        for j in 0..cfg.depth {
            let w = sample_contractive_matrix(d, &mut rng);
            let b_dir = random_unit(d, &mut rng);
            let bias: Vec<f64> = b_dir.iter().map(|v| v * cfg.bias_bound).collect();

            let mut pre_star = matvec(&w, &x_star, d);
            for (p, b) in pre_star.iter_mut().zip(&bias) {
                *p += b;
            }
            let mut pre_hat = matvec(&w, &x_hat, d);
            for (p, b) in pre_hat.iter_mut().zip(&bias) {
                *p += b;
            }

            // perturbation direction drawn independently of eps so that
            // trajectories at different eps share their randomness
            let random_dir = random_unit(d, &mut rng);
            let dir = if cfg.worst_case {
                let diff: Vec<f64> = pre_hat
                    .iter()
                    .zip(&pre_star)
                    .map(|(h, s)| h - s)
                    .collect();
                let n = norm(&diff);
                if n > 1e-12 {
                    diff.iter().map(|v| v / n).collect()
                } else {
                    random_dir
                }
            } else {
                random_dir
            };
            let magnitude = cfg.eps * (1.0 + norm(&x_star));
            for (p, u) in pre_hat.iter_mut().zip(&dir) {
                *p += magnitude * u;
            }

            relu_vec(&mut pre_star);
            relu_vec(&mut pre_hat);
            x_star = pre_star;
            x_hat = pre_hat;

            let dev = norm(
                &x_star
                    .iter()
                    .zip(&x_hat)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<f64>>(),
            );
            let bound = cascade_bound(cfg.eps, cfg.bias_bound, input_norm, j + 1);
            if dev > bound + 1e-12 {
                violations += 1;
            }
            deviations.push(dev);
            bounds.push(bound);
        }
        trials.push(CascadeTrial {
            deviations,
            bounds,
            input_norm,
        });
    }
    let mean_final_deviation =
        trials.iter().map(|t| *t.deviations.last().unwrap()).sum::<f64>() / cfg.trials.max(1) as f64;
    Ok(Prop2Report {
        config: cfg.clone(),
        trials,
        violations,
        mean_final_deviation,
    })
}

/// Least-squares slope of `ln(deviation)` against `ln(depth)`.
pub fn fit_growth_exponent(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(j, dev)| *j > 0.0 && *dev > 0.0)
        .map(|(j, dev)| (j.ln(), dev.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> CascadeSimConfig {
        CascadeSimConfig {
            depth: 8,
            dim: 16,
            bias_bound: 1.0,
            eps: 1e-3,
            trials: 20,
            seed: 99,
            worst_case: false,
        }
    }

    #[test]
    fn zero_eps_gives_exactly_zero_deviation() {
        let cfg = CascadeSimConfig {
            eps: 0.0,
            depth: 16,
            ..base_config()
        };
        let report = simulate_error_propagation(&cfg).unwrap();
        for t in &report.trials {
            assert!(t.deviations.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn single_layer_zero_bias_respects_eps_bound() {
        let cfg = CascadeSimConfig {
            depth: 1,
            bias_bound: 0.0,
            eps: 1e-2,
            trials: 50,
            worst_case: true,
            ..base_config()
        };
        let report = simulate_error_propagation(&cfg).unwrap();
        for t in &report.trials {
            assert!(t.deviations[0] <= cfg.eps * (t.input_norm + 1.0) + 1e-12);
        }
        assert!(report.pass());
    }

    #[test]
    fn no_bound_violations_in_either_perturbation_mode() {
        for worst_case in [false, true] {
            let cfg = CascadeSimConfig {
                worst_case,
                ..base_config()
            };
            let report = simulate_error_propagation(&cfg).unwrap();
            assert!(report.pass(), "violations in worst_case={worst_case}");
        }
    }

    #[test]
    fn operators_are_non_expansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let d = 16;
            let w = sample_contractive_matrix(d, &mut rng);
            let a = random_unit(d, &mut rng);
            let b: Vec<f64> = random_unit(d, &mut rng).iter().map(|v| v * 2.0).collect();
            let mut wa = matvec(&w, &a, d);
            let mut wb = matvec(&w, &b, d);
            relu_vec(&mut wa);
            relu_vec(&mut wb);
            let lhs = norm(&wa.iter().zip(&wb).map(|(x, y)| x - y).collect::<Vec<_>>());
            let rhs = norm(&a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<_>>());
            assert!(lhs <= rhs + 1e-9, "expansion: {lhs} > {rhs}");
        }
    }

    #[test]
    fn deviation_is_monotone_in_eps_under_coupling() {
        // same seed, same direction draws, increasing eps
        let mut prev = vec![0.0; 10];
        for &eps in &[1e-4, 1e-3, 1e-2, 1e-1] {
            let cfg = CascadeSimConfig {
                eps,
                trials: 10,
                depth: 8,
                ..base_config()
            };
            let report = simulate_error_propagation(&cfg).unwrap();
            let finals: Vec<f64> = report
                .trials
                .iter()
                .map(|t| *t.deviations.last().unwrap())
                .collect();
            for (i, (&f, &p)) in finals.iter().zip(&prev).enumerate() {
                assert!(
                    f >= p - 1e-12,
                    "trial {i}: deviation decreased from {p} to {f} at eps {eps}"
                );
            }
            prev = finals;
        }
    }

    #[test]
    fn growth_exponent_fits_the_quadratic_reference() {
        // exact J^2 data fits slope 2
        let points: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|&j| (j, j * j)).collect();
        let slope = fit_growth_exponent(&points);
        assert!((slope - 2.0).abs() < 1e-12);
    }

    #[test]
    fn progressive_improvement_report_flags_violations() {
        use crate::trainer::{EpochStats, LayerTrainResult};
        let result = |layer: usize, risk: f64, identity: bool| LayerTrainResult {
            layer,
            epochs: vec![EpochStats {
                epoch: 0,
                lr: 0.1,
                train_risk: risk,
                train_acc: 0.0,
                test_acc: 0.0,
            }],
            best_epoch: 0,
            train_risk: risk,
            train_acc: 0.0,
            test_top1: 0.0,
            test_top5: 0.0,
            identity_init: identity,
            wall_time_s: 0.0,
        };
        let train = crate::trainer::tests::toy_dataset(32, 4, 201);
        let cfg = crate::trainer::tests::toy_config(1, 1, 0);
        let mut metrics = crate::metrics::MetricsWriter::sink();
        let mut net =
            crate::trainer::train_greedy(&cfg, &train, &train, &mut metrics, None).unwrap();
        net.results = vec![
            result(0, 2.0, false),
            result(1, 1.5, true),
            result(2, 1.6, true), // regression: must be flagged
            result(3, 1.2, false), // not applicable: no assertion
        ];
        let report = check_progressive_improvement(&net);
        assert_eq!(report.violations, 1);
        assert!(report.entries[2].violation);
        assert!(!report.entries[3].applicable);
    }
}
