//! Separability probes over cached representations.
//!
//! The linear probe measures the accuracy of a multinomial logistic
//! regression over quadrant-averaged features; the CNN-p probe trains a
//! p-hidden-layer CNN (the same construction as an auxiliary head with
//! k = p+1) on the frozen features. Probes read caches and never touch the
//! probed network.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::AuxSpec;
use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::forward::{aux_backward, aux_forward_eval, aux_forward_train, init_aux, topk_accuracy};
use crate::kernels::{avg_quadrants, linear, linear_backward, softmax_cross_entropy};
use crate::optim::Velocity;
use crate::params::LinearParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Cnn,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    pub layer: usize,
    pub kind: ProbeKind,
    /// Hidden-layer count of the probe CNN; 0 for the linear probe.
    pub p: usize,
    pub width: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    /// CNN probe width (M~ of the probe head).
    pub width: usize,
    /// CNN probe epochs.
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Linear probe: full-batch iteration cap and loss-delta tolerance.
    pub max_linear_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            width: 256,
            epochs: 30,
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 128,
            max_linear_iters: 500,
            tol: 1e-6,
            seed: 0,
            weight_decay: 5e-4,
        }
    }
}

/// Quadrant-average a cache and flatten to `(n, c*4)` feature rows.
pub fn pooled_features(cache: &ActivationCache) -> Array2<f32> {
    let n = cache.len();
    let (_, c, _, _) = cache.shape();
    let mut out = Array2::<f32>::zeros((n, c * 4));
    let mut start = 0;
    while start < n {
        let end = (start + 512).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let pooled = avg_quadrants(&cache.batch(&idx));
        let flat = pooled.into_shape((end - start, c * 4)).unwrap();
        out.slice_mut(ndarray::s![start..end, ..]).assign(&flat);
        start = end;
    }
    out
}

/// Standardize columns with the training split's statistics.
fn standardize(train: &Array2<f32>, test: &Array2<f32>) -> (Array2<f64>, Array2<f64>) {
    let n = train.dim().0 as f64;
    let dim = train.dim().1;
    let mut mean = Array1::<f64>::zeros(dim);
    let mut std = Array1::<f64>::zeros(dim);
    for d in 0..dim {
        let col = train.index_axis(Axis(1), d);
        let m: f64 = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = col.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
        mean[d] = m;
        std[d] = var.sqrt().max(1e-8);
    }
    let apply = |x: &Array2<f32>| {
        let mut out = Array2::<f64>::zeros(x.raw_dim());
        for ((i, j), v) in x.indexed_iter() {
            out[[i, j]] = (*v as f64 - mean[j]) / std[j];
        }
        out
    };
    (apply(train), apply(test))
}

/// Multinomial logistic regression by full-batch gradient descent with
/// momentum, run to tolerance on the loss delta.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    layer: usize,
    train_cache: &ActivationCache,
    train_labels: &[usize],
    test_cache: &ActivationCache,
    test_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let train_feats = pooled_features(train_cache);
    let test_feats = pooled_features(test_cache);
    let (xtr, xte) = standardize(&train_feats, &test_feats);
    let dim = xtr.dim().1;

    let mut attempt_lr = cfg.lr0;
    for attempt in 0..2 {
        match fit_logreg(&xtr, train_labels, classes, dim, attempt_lr, cfg) {
            Ok(params) => {
                let train_acc = topk_accuracy(&linear(&xtr, &params), train_labels).0;
                let test_acc = topk_accuracy(&linear(&xte, &params), test_labels).0;
                return Ok(ProbeReport {
                    layer,
                    kind: ProbeKind::Linear,
                    p: 0,
                    width: 0,
                    train_acc,
                    test_acc,
                    seed: cfg.seed,
                });
            }
            Err(_) if attempt == 0 => attempt_lr /= 10.0,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn fit_logreg(
    x: &Array2<f64>,
    labels: &[usize],
    classes: usize,
    dim: usize,
    lr: f64,
    cfg: &ProbeConfig,
) -> Result<LinearParams<f64>> {
    let mut params = LinearParams::<f64>::zeros(classes, dim);
    let mut vw = Velocity::zeros_like(&params.weight);
    let mut vb = Velocity::zeros_like(&params.bias);
    let mut prev_loss = f64::INFINITY;
    for _ in 0..cfg.max_linear_iters {
        let logits = linear(x, &params);
        let (loss, grad) = softmax_cross_entropy(&logits, labels);
        if !loss.is_finite() {
            return Err(Error::Numeric("linear probe diverged".into()));
        }
        let (_, gw, gb) = linear_backward(x, &params, &grad);
        vw.step(&mut params.weight, &gw, lr, cfg.momentum)?;
        vb.step(&mut params.bias, &gb, lr, cfg.momentum)?;
        if (prev_loss - loss).abs() < cfg.tol {
            break;
        }
        prev_loss = loss;
    }
    Ok(params)
}

/// Train a p-hidden-layer CNN probe on frozen features. Retries once at a
/// tenth of the learning rate on divergence.
#[allow(clippy::too_many_arguments)]
pub fn cnn_probe(
    layer: usize,
    train_cache: &ActivationCache,
    train_labels: &[usize],
    test_cache: &ActivationCache,
    test_labels: &[usize],
    classes: usize,
    p: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if !(p == 1 || p == 2) {
        return Err(Error::Config(format!("cnn probe needs p in {{1,2}}, got {p}")));
    }
    let (_, c, h, w) = train_cache.shape();
    let spec = AuxSpec {
        k: p + 1,
        width: cfg.width,
        batchnorm: true,
        in_width: c,
        classes,
        prepool: false,
        spatial: (h, w),
    };
    let mut lr0 = cfg.lr0;
    for attempt in 0..2 {
        match fit_cnn_probe(&spec, train_cache, train_labels, lr0, cfg) {
            Ok(params) => {
                let eval = |cache: &ActivationCache, labels: &[usize]| -> f64 {
                    let n = cache.len();
                    let mut correct = 0usize;
                    let mut start = 0;
                    while start < n {
                        let end = (start + cfg.batch_size).min(n);
                        let idx: Vec<usize> = (start..end).collect();
                        let logits = aux_forward_eval(&cache.batch(&idx), &params, &spec);
                        let (t1, _) = topk_accuracy(&logits, &labels[start..end]);
                        correct += (t1 / 100.0 * (end - start) as f64).round() as usize;
                        start = end;
                    }
                    100.0 * correct as f64 / n as f64
                };
                return Ok(ProbeReport {
                    layer,
                    kind: ProbeKind::Cnn,
                    p,
                    width: cfg.width,
                    train_acc: eval(train_cache, train_labels),
                    test_acc: eval(test_cache, test_labels),
                    seed: cfg.seed,
                });
            }
            Err(_) if attempt == 0 => lr0 /= 10.0,
            Err(e) => {
                return Err(Error::Numeric(format!(
                    "cnn probe failed after lr retry: {e}"
                )))
            }
        }
    }
    unreachable!()
}

fn fit_cnn_probe(
    spec: &AuxSpec,
    cache: &ActivationCache,
    labels: &[usize],
    lr0: f64,
    cfg: &ProbeConfig,
) -> Result<crate::params::AuxParams<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70726f6265); // "probe"
    let mut params = init_aux::<f32, _>(&mut rng, spec);
    let mut vels: Vec<(Velocity<f32, ndarray::Ix4>, Velocity<f32, ndarray::Ix1>)> = params
        .convs
        .iter()
        .map(|c| (Velocity::zeros_like(&c.kernel), Velocity::zeros_like(&c.bias)))
        .collect();
    let mut bn_vels: Vec<Option<(Velocity<f32, ndarray::Ix1>, Velocity<f32, ndarray::Ix1>)>> =
        params
            .bns
            .iter()
            .map(|b| b.as_ref().map(|bn| (Velocity::zeros_like(&bn.scale), Velocity::zeros_like(&bn.shift))))
            .collect();
    let mut vw = Velocity::zeros_like(&params.head.weight);
    let mut vb = Velocity::zeros_like(&params.head.bias);

    let n = cache.len();
    let decay_every = (cfg.epochs / 3).max(1);
    for epoch in 0..cfg.epochs {
        let lr = (lr0 * 0.2f64.powi((epoch / decay_every) as i32)) as f32;
        let momentum = cfg.momentum as f32;
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let x = cache.batch(idx);
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = aux_forward_train(&x, &mut params, spec);
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch_labels);
            if !loss.is_finite() {
                return Err(Error::Numeric("probe loss diverged".into()));
            }
            let (grads, _) = aux_backward(&params, &trace, &grad_logits);
            let wd = cfg.weight_decay as f32;
            for (i, conv) in params.convs.iter_mut().enumerate() {
                vels[i].0.step_decayed(&mut conv.kernel, &grads.convs[i].0, lr, momentum, wd)?;
                vels[i].1.step(&mut conv.bias, &grads.convs[i].1, lr, momentum)?;
                if let (Some(bn), Some((vs, vsh)), Some((gs, gsh))) = (
                    params.bns[i].as_mut(),
                    bn_vels[i].as_mut(),
                    grads.bns[i].as_ref(),
                ) {
                    vs.step(&mut bn.scale, gs, lr, momentum)?;
                    vsh.step(&mut bn.shift, gsh, lr, momentum)?;
                }
            }
            vw.step_decayed(&mut params.head.weight, &grads.head_w, lr, momentum, wd)?;
            vb.step(&mut params.head.bias, &grads.head_b, lr, momentum)?;
        }
    }
    Ok(params)
}
