//! Prune-while-training: after a layer is trained, remove its lowest-scored
//! output filters and fine-tune only the auxiliary head on the remaining
//! features. Later layers then train against the reduced width.
//!
//! Filters are ranked by the first-order saliency `|activation . gradient|`:
//! per sample, the spatial mean of the elementwise product of the layer's
//! output with the loss gradient at that output, absolute value, averaged
//! over the scoring data.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::arch::{AuxSpec, BlockSpec, DownsampleKind};
use crate::cache::ActivationCache;
use crate::error::{Error, Result};
use crate::forward::{aux_backward, aux_forward_train, block_forward_eval, block_forward_train};
use crate::kernels::{conv2d, invertible_downsample, softmax_cross_entropy};
use crate::optim::{OptimConfig, Velocity};
use crate::params::{AuxParams, BlockParams};
use crate::tensor::Scalar;
use crate::trainer::eval_on_cache;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruneRecord {
    pub layer: usize,
    pub width_before: usize,
    pub width_after: usize,
    /// Removed output-channel indices, ascending.
    pub removed: Vec<usize>,
    /// Saliency score per original output channel.
    pub scores: Vec<f64>,
    pub finetune_epochs: usize,
    /// Auxiliary test accuracy before pruning.
    pub acc_before: f64,
    /// After pruning, before any fine-tuning.
    pub acc_after_prune: f64,
    /// After fine-tuning the auxiliary head.
    pub acc_after: f64,
}

/// Saliency scores for one batch at any precision (the verification oracle
/// runs this at f64 against finite differences).
pub fn filter_scores_batch<A: Scalar>(
    block: &BlockParams<A>,
    aux: &AuxParams<A>,
    bspec: &BlockSpec,
    aspec: &AuxSpec,
    x: &Array4<A>,
    labels: &[usize],
) -> Vec<f64> {
    let mut block = block.clone();
    let mut aux = aux.clone();
    let (out, _) = block_forward_train(x, &mut block, bspec);
    let (logits, trace) = aux_forward_train(&out, &mut aux, aspec);
    let (_, grad_logits) = softmax_cross_entropy(&logits, labels);
    let (_, grad_out) = aux_backward(&aux, &trace, &grad_logits);

    let (n, c, h, w) = out.dim();
    let inv_hw = 1.0 / (h * w) as f64;
    let mut scores = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let a = out.index_axis(Axis(0), s);
            let a = a.index_axis(Axis(0), ch);
            let g = grad_out.index_axis(Axis(0), s);
            let g = g.index_axis(Axis(0), ch);
            let mut acc = 0.0f64;
            for (&av, &gv) in a.iter().zip(g.iter()) {
                acc += av.to_f64() * gv.to_f64();
            }
            scores[ch] += (acc * inv_hw).abs();
        }
    }
    for s in scores.iter_mut() {
        *s /= n as f64;
    }
    scores
}

/// Average saliency per output filter over a full pass of the cached
/// training activations, in a fixed batch order.
pub fn rank_filters(
    block: &BlockParams<f32>,
    aux: &AuxParams<f32>,
    bspec: &BlockSpec,
    aspec: &AuxSpec,
    cache: &ActivationCache,
    labels: &[usize],
    batch_size: usize,
) -> Vec<f64> {
    let n = cache.len();
    let c = bspec.out_width;
    let mut scores = vec![0.0f64; c];
    let mut weight = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        if end - start < 2 {
            break; // batch-norm scoring needs 2+ samples
        }
        let idx: Vec<usize> = (start..end).collect();
        let x = cache.batch(&idx);
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch_scores = filter_scores_batch(block, aux, bspec, aspec, &x, &batch_labels);
        let bn = (end - start) as f64;
        for (acc, s) in scores.iter_mut().zip(batch_scores) {
            *acc += s * bn;
        }
        weight += bn;
        start = end;
    }
    for s in scores.iter_mut() {
        *s /= weight;
    }
    scores
}

/// Channels to remove: the `width - target` lowest scores, ties broken
/// toward the lower channel index.
pub fn select_removed(scores: &[f64], target_width: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut removed: Vec<usize> = order[..scores.len() - target_width].to_vec();
    removed.sort_unstable();
    removed
}

fn keep_indices(width: usize, removed: &[usize]) -> Vec<usize> {
    let removed: std::collections::HashSet<usize> = removed.iter().copied().collect();
    (0..width).filter(|i| !removed.contains(i)).collect()
}

/// Drop output channels of the block and the matching input slices of its
/// consumers (first aux convolution, or the head columns for k = 1).
fn slice_params(
    block: &BlockParams<f32>,
    aux: &AuxParams<f32>,
    keep: &[usize],
) -> (BlockParams<f32>, AuxParams<f32>) {
    let mut block = block.clone();
    block.conv.kernel = block.conv.kernel.select(Axis(0), keep);
    block.conv.bias = block.conv.bias.select(Axis(0), keep);
    if let Some(bn) = block.bn.as_mut() {
        bn.scale = bn.scale.select(Axis(0), keep);
        bn.shift = bn.shift.select(Axis(0), keep);
        bn.running_mean = bn.running_mean.select(Axis(0), keep);
        bn.running_var = bn.running_var.select(Axis(0), keep);
    }
    let mut aux = aux.clone();
    if let Some(first) = aux.convs.first_mut() {
        first.kernel = first.kernel.select(Axis(1), keep);
    } else {
        // k = 1: the head reads quadrant-averaged features, 4 per channel
        let cols: Vec<usize> = keep
            .iter()
            .flat_map(|&c| (0..4).map(move |q| c * 4 + q))
            .collect();
        aux.head.weight = aux.head.weight.select(Axis(1), &cols);
    }
    (block, aux)
}

/// Recompute the block's batch-norm running statistics as the population
/// statistics of the pruned convolution output over the cache. Weights are
/// untouched.
fn refresh_bn_stats(
    block: &mut BlockParams<f32>,
    bspec: &BlockSpec,
    cache: &ActivationCache,
    batch_size: usize,
) {
    let Some(bn) = block.bn.as_mut() else { return };
    let c = block.conv.kernel.shape()[0];
    let stride = if bspec.downsample == Some(DownsampleKind::Stride) { 2 } else { 1 };
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    let mut count = 0.0f64;
    let n = cache.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = cache.batch(&idx);
        let x = match bspec.downsample {
            Some(DownsampleKind::Invertible) => invertible_downsample(&x),
            Some(DownsampleKind::AvgPool) => crate::kernels::avg_pool2(&x),
            Some(DownsampleKind::MaxPool) => crate::kernels::max_pool2(&x).0,
            _ => x,
        };
        let y = conv2d(&x, &block.conv, 1, stride);
        let (bn_n, _, h, w) = y.dim();
        count += (bn_n * h * w) as f64;
        for ch in 0..c {
            let lane = y.index_axis(Axis(1), ch);
            for &v in lane.iter() {
                sum[ch] += v as f64;
                sumsq[ch] += (v as f64) * (v as f64);
            }
        }
        start = end;
    }
    for ch in 0..c {
        let mean = sum[ch] / count;
        let var = (sumsq[ch] / count - mean * mean).max(0.0);
        bn.running_mean[ch] = mean as f32;
        bn.running_var[ch] = var as f32;
    }
}

/// Prune one trained layer to `target_width` and fine-tune its auxiliary
/// head. Returns the updated parameters, updated (block, aux) shape specs
/// and the record. Only the auxiliary parameters change during fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn prune_and_finetune(
    block: &BlockParams<f32>,
    aux: &AuxParams<f32>,
    bspec: &BlockSpec,
    aspec: &AuxSpec,
    cache_train: &ActivationCache,
    labels: &[usize],
    cache_test: &ActivationCache,
    test_labels: &[usize],
    target_width: usize,
    finetune_epochs: usize,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(BlockParams<f32>, AuxParams<f32>, BlockSpec, AuxSpec, PruneRecord)> {
    let width = bspec.out_width;
    if target_width >= width {
        return Err(Error::Config(format!(
            "target width {target_width} must be below the current width {width}"
        )));
    }
    let batch_size = optim.batch_size;
    let (_, acc_before) = eval_on_cache(cache_test, test_labels, block, aux, bspec, aspec, batch_size);

    let scores = rank_filters(block, aux, bspec, aspec, cache_train, labels, batch_size);
    let removed = select_removed(&scores, target_width);
    let keep = keep_indices(width, &removed);
    let (mut new_block, mut new_aux) = slice_params(block, aux, &keep);

    let mut new_bspec = bspec.clone();
    new_bspec.out_width = target_width;
    let mut new_aspec = aspec.clone();
    new_aspec.in_width = target_width;

    refresh_bn_stats(&mut new_block, &new_bspec, cache_train, batch_size);

    let (_, acc_after_prune) = eval_on_cache(
        cache_test,
        test_labels,
        &new_block,
        &new_aux,
        &new_bspec,
        &new_aspec,
        batch_size,
    );

    // Fine-tune the head on the (frozen) pruned block's outputs.
    let out_train = materialize_outputs(cache_train, &new_block, &new_bspec, batch_size);
    let n = out_train.dim().0;
    let mut vels: Vec<(Velocity<f32, ndarray::Ix4>, Velocity<f32, ndarray::Ix1>)> = new_aux
        .convs
        .iter()
        .map(|c| (Velocity::zeros_like(&c.kernel), Velocity::zeros_like(&c.bias)))
        .collect();
    let mut bn_vels: Vec<Option<(Velocity<f32, ndarray::Ix1>, Velocity<f32, ndarray::Ix1>)>> =
        new_aux
            .bns
            .iter()
            .map(|b| {
                b.as_ref()
                    .map(|bn| (Velocity::zeros_like(&bn.scale), Velocity::zeros_like(&bn.shift)))
            })
            .collect();
    let mut vw = Velocity::zeros_like(&new_aux.head.weight);
    let mut vb = Velocity::zeros_like(&new_aux.head.bias);

    // fine-tune at the first decayed step of the layer schedule
    let ft_lr0 = optim.lr0 * optim.decay_factor;
    let decay_every = (finetune_epochs / 2).max(1);
    let mut best = (f64::INFINITY, new_aux.clone());
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7072756e65); // "prune"
    for epoch in 0..finetune_epochs {
        let lr = (ft_lr0 * optim.decay_factor.powi((epoch / decay_every) as i32)) as f32;
        let momentum = optim.momentum as f32;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for idx in order.chunks(batch_size).filter(|c| c.len() >= 2) {
            let x = gather(&out_train, idx);
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, trace) = aux_forward_train(&x, &mut new_aux, &new_aspec);
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch_labels);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "fine-tune diverged at epoch {epoch}"
                )));
            }
            let (grads, _) = aux_backward(&new_aux, &trace, &grad_logits);
            let wd = optim.weight_decay as f32;
            for (i, conv) in new_aux.convs.iter_mut().enumerate() {
                vels[i].0.step_decayed(&mut conv.kernel, &grads.convs[i].0, lr, momentum, wd)?;
                vels[i].1.step(&mut conv.bias, &grads.convs[i].1, lr, momentum)?;
                if let (Some(bn), Some((vs, vsh)), Some((gs, gsh))) = (
                    new_aux.bns[i].as_mut(),
                    bn_vels[i].as_mut(),
                    grads.bns[i].as_ref(),
                ) {
                    vs.step(&mut bn.scale, gs, lr, momentum)?;
                    vsh.step(&mut bn.shift, gsh, lr, momentum)?;
                }
            }
            vw.step_decayed(&mut new_aux.head.weight, &grads.head_w, lr, momentum, wd)?;
            vb.step(&mut new_aux.head.bias, &grads.head_b, lr, momentum)?;
        }
        let (risk, _) = eval_on_cache(
            cache_train,
            labels,
            &new_block,
            &new_aux,
            &new_bspec,
            &new_aspec,
            batch_size,
        );
        if risk < best.0 {
            best = (risk, new_aux.clone());
        }
    }
    let new_aux = if finetune_epochs > 0 { best.1 } else { new_aux };

    let (_, acc_after) = eval_on_cache(
        cache_test,
        test_labels,
        &new_block,
        &new_aux,
        &new_bspec,
        &new_aspec,
        batch_size,
    );

    let record = PruneRecord {
        layer: bspec.index,
        width_before: width,
        width_after: target_width,
        removed,
        scores,
        finetune_epochs,
        acc_before,
        acc_after_prune,
        acc_after,
    };
    Ok((new_block, new_aux, new_bspec, new_aspec, record))
}

fn materialize_outputs(
    cache: &ActivationCache,
    block: &BlockParams<f32>,
    bspec: &BlockSpec,
    batch_size: usize,
) -> Array4<f32> {
    let n = cache.len();
    let (h, w) = bspec.spatial_out;
    let mut out = Array4::<f32>::zeros((n, bspec.out_width, h, w));
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let y = block_forward_eval(&cache.batch(&idx), block, bspec);
        out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&y);
        start = end;
    }
    out
}

fn gather(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&images.index_axis(Axis(0), i));
    }
    out
}

/// Parameter fingerprint of a single block (for frozen-weight assertions).
pub fn block_fingerprint(block: &BlockParams<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in block.conv.kernel.iter().chain(block.conv.bias.iter()) {
        hasher.update(v.to_le_bytes());
    }
    if let Some(bn) = &block.bn {
        for v in bn.scale.iter().chain(bn.shift.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}
