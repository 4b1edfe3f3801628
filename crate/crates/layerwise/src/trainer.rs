//! Greedy layer-by-layer training.
//!
//! One block at a time: attach a fresh auxiliary head, optimize (block, head)
//! by SGD over activations cached from the frozen prefix, keep the best
//! parameters seen along the trajectory (initialization included), freeze,
//! advance the cache, repeat.
//!
//! Blocks whose downsampler is the identity and whose shapes match the
//! previous layer are *warm-started from the identity candidate*: a delta
//! kernel plus a copy of the previous head. Evaluated before the first step
//! and kept in the trajectory, that candidate pins this layer's recorded
//! risk at or below the previous layer's, so train risks are non-increasing
//! by construction wherever the construction applies.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{build_network, AuxSpec, BlockSpec, NetworkSpec};
use crate::cache::{prefix_fingerprint, ActivationCache};
use crate::config::TrainConfig;
use crate::data::{augment_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::forward::{
    aux_backward, aux_forward_eval, aux_forward_train, block_backward, block_forward_eval,
    block_forward_train, forward_prefix, identity_block, init_aux, init_block, topk_accuracy,
};
use crate::kernels::{invertible_downsample, softmax_cross_entropy, softmax_probs};
use crate::metrics::{EpochRecord, LayerSummaryRecord, MetricsWriter, Record};
use crate::optim::Velocity;
use crate::params::{AuxParams, BlockParams};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_risk: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerTrainResult {
    pub layer: usize,
    /// Trajectory checkpoints: entry 0 is the initialization, then one per epoch.
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Full-pass train risk of the returned parameters (the trajectory minimum).
    pub train_risk: f64,
    pub train_acc: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    /// Whether this layer was warm-started from the identity candidate.
    pub identity_init: bool,
    pub wall_time_s: f64,
}

/// A trained stack of frozen blocks with their per-layer auxiliary heads.
#[derive(Debug, Clone)]
pub struct GreedyNet {
    pub spec: NetworkSpec,
    pub blocks: Vec<BlockParams<f32>>,
    pub aux: Vec<AuxParams<f32>>,
    pub results: Vec<LayerTrainResult>,
    pub config: TrainConfig,
    pub norm: crate::data::ChannelStats,
}

impl GreedyNet {
    pub fn trained_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Deterministic per-(seed, layer, purpose, epoch) RNG stream.
fn stream_rng(seed: u64, layer: usize, purpose: u64, epoch: usize) -> ChaCha8Rng {
    let mix = seed
        ^ (layer as u64).wrapping_mul(0x9e3779b97f4a7c15)
        ^ purpose.wrapping_mul(0xbf58476d1ce4e5b9)
        ^ (epoch as u64).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(mix)
}

const PURPOSE_INIT: u64 = 1;
const PURPOSE_SHUFFLE: u64 = 2;
const PURPOSE_AUGMENT: u64 = 3;

/// The identity warm start applies when nothing about the layer's shape or
/// head differs from its predecessor and the main block carries no batch
/// norm (which would break exact reproduction).
pub fn identity_applicable(spec: &NetworkSpec, j: usize) -> bool {
    j > 0
        && spec.blocks[j].downsample.is_none()
        && spec.blocks[j].conv_in == spec.blocks[j].out_width
        && spec.blocks[j].out_width == spec.blocks[j - 1].out_width
        && !spec.blocks[j].batchnorm
        && spec.aux[j] == spec.aux[j - 1]
}

/// Full-pass risk and top-1 accuracy of (block, head) over a cache, in a
/// fixed batch order. This is the trajectory-checkpoint evaluation.
pub fn eval_on_cache(
    cache: &ActivationCache,
    labels: &[usize],
    block: &BlockParams<f32>,
    aux: &AuxParams<f32>,
    bspec: &BlockSpec,
    aspec: &AuxSpec,
    batch_size: usize,
) -> (f64, f64) {
    let n = cache.len();
    assert_eq!(labels.len(), n);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = cache.batch(&idx);
        let out = block_forward_eval(&x, block, bspec);
        let logits = aux_forward_eval(&out, aux, aspec);
        let probs = softmax_probs(&logits);
        for (row, &label) in probs.outer_iter().zip(&labels[start..end]) {
            loss_sum -= (row[label] as f64).ln();
            let higher = row.iter().filter(|&&v| v > row[label]).count();
            if higher == 0 {
                correct += 1;
            }
        }
        start = end;
    }
    (loss_sum / n as f64, 100.0 * correct as f64 / n as f64)
}

struct LayerOptimizer {
    conv_k: Velocity<f32, ndarray::Ix4>,
    conv_b: Velocity<f32, ndarray::Ix1>,
    bn: Option<(Velocity<f32, ndarray::Ix1>, Velocity<f32, ndarray::Ix1>)>,
    aux_convs: Vec<(Velocity<f32, ndarray::Ix4>, Velocity<f32, ndarray::Ix1>)>,
    aux_bns: Vec<Option<(Velocity<f32, ndarray::Ix1>, Velocity<f32, ndarray::Ix1>)>>,
    head_w: Velocity<f32, ndarray::Ix2>,
    head_b: Velocity<f32, ndarray::Ix1>,
}

impl LayerOptimizer {
    fn new(block: &BlockParams<f32>, aux: &AuxParams<f32>) -> Self {
        Self {
            conv_k: Velocity::zeros_like(&block.conv.kernel),
            conv_b: Velocity::zeros_like(&block.conv.bias),
            bn: block
                .bn
                .as_ref()
                .map(|bn| (Velocity::zeros_like(&bn.scale), Velocity::zeros_like(&bn.shift))),
            aux_convs: aux
                .convs
                .iter()
                .map(|c| (Velocity::zeros_like(&c.kernel), Velocity::zeros_like(&c.bias)))
                .collect(),
            aux_bns: aux
                .bns
                .iter()
                .map(|bn| {
                    bn.as_ref()
                        .map(|b| (Velocity::zeros_like(&b.scale), Velocity::zeros_like(&b.shift)))
                })
                .collect(),
            head_w: Velocity::zeros_like(&aux.head.weight),
            head_b: Velocity::zeros_like(&aux.head.bias),
        }
    }
}

/// One SGD step over every trainable tensor of the (block, head) pair.
/// Weight decay applies to kernels and the head matrix only.
#[allow(clippy::too_many_arguments)]
fn apply_step(
    block: &mut BlockParams<f32>,
    aux: &mut AuxParams<f32>,
    opt: &mut LayerOptimizer,
    bgrads: &crate::forward::BlockGrads<f32>,
    agrads: &crate::forward::AuxGrads<f32>,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    train_block: bool,
) -> Result<()> {
    if train_block {
        opt.conv_k
            .step_decayed(&mut block.conv.kernel, &bgrads.kernel, lr, momentum, weight_decay)?;
        opt.conv_b.step(&mut block.conv.bias, &bgrads.bias, lr, momentum)?;
        if let (Some(bn), Some((vs, vb)), Some((gs, gb))) =
            (block.bn.as_mut(), opt.bn.as_mut(), bgrads.bn.as_ref())
        {
            vs.step(&mut bn.scale, gs, lr, momentum)?;
            vb.step(&mut bn.shift, gb, lr, momentum)?;
        }
    }
    for (i, conv) in aux.convs.iter_mut().enumerate() {
        let (vk, vb) = &mut opt.aux_convs[i];
        vk.step_decayed(&mut conv.kernel, &agrads.convs[i].0, lr, momentum, weight_decay)?;
        vb.step(&mut conv.bias, &agrads.convs[i].1, lr, momentum)?;
        if let (Some(bn), Some((vs, vsh)), Some((gs, gsh))) = (
            aux.bns[i].as_mut(),
            opt.aux_bns[i].as_mut(),
            agrads.bns[i].as_ref(),
        ) {
            vs.step(&mut bn.scale, gs, lr, momentum)?;
            vsh.step(&mut bn.shift, gsh, lr, momentum)?;
        }
    }
    opt.head_w
        .step_decayed(&mut aux.head.weight, &agrads.head_w, lr, momentum, weight_decay)?;
    opt.head_b.step(&mut aux.head.bias, &agrads.head_b, lr, momentum)?;
    Ok(())
}

/// Scale all gradients so their joint Euclidean norm is at most `max`.
/// Returns the pre-clip norm.
fn clip_gradients(
    bgrads: &mut crate::forward::BlockGrads<f32>,
    agrads: &mut crate::forward::AuxGrads<f32>,
    max: f32,
) -> f32 {
    let mut sq = 0.0f64;
    let mut add = |it: &mut dyn Iterator<Item = &f32>| {
        for v in it {
            sq += (*v as f64) * (*v as f64);
        }
    };
    add(&mut bgrads.kernel.iter());
    add(&mut bgrads.bias.iter());
    if let Some((gs, gb)) = &bgrads.bn {
        add(&mut gs.iter());
        add(&mut gb.iter());
    }
    for (gk, gb) in &agrads.convs {
        add(&mut gk.iter());
        add(&mut gb.iter());
    }
    for bn in agrads.bns.iter().flatten() {
        add(&mut bn.0.iter());
        add(&mut bn.1.iter());
    }
    add(&mut agrads.head_w.iter());
    add(&mut agrads.head_b.iter());
    let norm = sq.sqrt() as f32;
    if norm > max {
        let factor = max / norm;
        let scale = |t: &mut ndarray::Array4<f32>| t.mapv_inplace(|v| v * factor);
        scale(&mut bgrads.kernel);
        bgrads.bias.mapv_inplace(|v| v * factor);
        if let Some((gs, gb)) = bgrads.bn.as_mut() {
            gs.mapv_inplace(|v| v * factor);
            gb.mapv_inplace(|v| v * factor);
        }
        for (gk, gb) in agrads.convs.iter_mut() {
            gk.mapv_inplace(|v| v * factor);
            gb.mapv_inplace(|v| v * factor);
        }
        for bn in agrads.bns.iter_mut().flatten() {
            bn.0.mapv_inplace(|v| v * factor);
            bn.1.mapv_inplace(|v| v * factor);
        }
        agrads.head_w.mapv_inplace(|v| v * factor);
        agrads.head_b.mapv_inplace(|v| v * factor);
    }
    norm
}

fn training_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // drop a trailing fragment smaller than 2 (batch norm needs 2+ samples)
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

pub struct GreedyTrainer<'a> {
    cfg: &'a TrainConfig,
    spec: NetworkSpec,
    train: LabeledDataset,
    test: &'a LabeledDataset,
    blocks: Vec<BlockParams<f32>>,
    aux: Vec<AuxParams<f32>>,
    results: Vec<LayerTrainResult>,
    cache_train: ActivationCache,
    cache_test: ActivationCache,
    cache_dir: Option<std::path::PathBuf>,
}

impl<'a> GreedyTrainer<'a> {
    pub fn new(
        cfg: &'a TrainConfig,
        train: &LabeledDataset,
        test: &'a LabeledDataset,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = build_network(&cfg.net)?;
        let train = match cfg.train_subset {
            Some(n) => train.subset(n),
            None => train.clone(),
        };
        if train.len() < 2 {
            return Err(Error::Config("training set too small".into()));
        }
        let cache_train = ActivationCache::from_inputs(
            &train.images,
            cfg.net.input_downsample,
            cfg.cache_mode,
            cache_dir,
        )?;
        let cache_test = ActivationCache::from_inputs(
            &test.images,
            cfg.net.input_downsample,
            cfg.cache_mode,
            cache_dir,
        )?;
        Ok(Self {
            cfg,
            spec,
            train,
            test,
            blocks: Vec::new(),
            aux: Vec::new(),
            results: Vec::new(),
            cache_train,
            cache_test,
            cache_dir: cache_dir.map(|p| p.to_path_buf()),
        })
    }

    pub fn net(&self) -> GreedyNet {
        GreedyNet {
            spec: self.spec.clone(),
            blocks: self.blocks.clone(),
            aux: self.aux.clone(),
            results: self.results.clone(),
            config: self.cfg.clone(),
            norm: self.train.norm.clone(),
        }
    }

    /// Train all remaining layers in order, appending metrics and (when a
    /// directory is given) a checkpoint after each layer. On a layer
    /// failure the partial network is checkpointed before the error
    /// propagates.
    pub fn run(
        &mut self,
        metrics: &mut MetricsWriter,
        checkpoint_dir: Option<&Path>,
    ) -> Result<GreedyNet> {
        for j in self.blocks.len()..self.spec.depth() {
            match self.train_layer(j, metrics) {
                Ok(()) => {
                    if let Some(dir) = checkpoint_dir {
                        crate::checkpoint::save(&self.net(), &dir.join("checkpoint.glwc"))?;
                    }
                }
                Err(e) => {
                    if let Some(dir) = checkpoint_dir {
                        let _ = crate::checkpoint::save(
                            &self.net(),
                            &dir.join("checkpoint-partial.glwc"),
                        );
                    }
                    return Err(e);
                }
            }
            if j + 1 < self.spec.depth() {
                self.advance_caches()?;
            }
        }
        metrics.flush()?;
        Ok(self.net())
    }

    fn advance_caches(&mut self) -> Result<()> {
        let dir = self.cache_dir.as_deref();
        self.cache_train =
            self.cache_train
                .advance(&self.blocks, &self.spec.blocks, self.cfg.cache_mode, dir)?;
        self.cache_test =
            self.cache_test
                .advance(&self.blocks, &self.spec.blocks, self.cfg.cache_mode, dir)?;
        Ok(())
    }

    /// Train layer `j` on the current caches.
    fn train_layer(&mut self, j: usize, metrics: &mut MetricsWriter) -> Result<()> {
        let started = Instant::now();
        let cfg = self.cfg;
        let run_id = cfg.run_id();
        self.cache_train
            .check_fingerprint(&prefix_fingerprint(&self.blocks, j))?;
        let bspec = self.spec.blocks[j].clone();
        let aspec = self.spec.aux[j].clone();

        let identity = identity_applicable(&self.spec, j);
        if !identity && j > 0 && bspec.downsample.is_none() && !bspec.batchnorm {
            eprintln!(
                "layer {j}: identity warm start inapplicable (shape or head mismatch); \
                 using random initialization"
            );
        }
        let mut init_rng = stream_rng(cfg.seed, j, PURPOSE_INIT, 0);
        let (mut block, mut aux) = if identity {
            (
                identity_block::<f32>(bspec.out_width),
                self.aux[j - 1].clone(),
            )
        } else {
            (
                init_block::<f32, _>(&mut init_rng, &bspec),
                init_aux::<f32, _>(&mut init_rng, &aspec),
            )
        };

        let mut opt = LayerOptimizer::new(&block, &aux);
        let labels = self.train.labels.clone();
        let test_labels = self.test.labels.clone();
        let batch_size = cfg.optim.batch_size;

        let mut epochs = Vec::with_capacity(cfg.optim.epochs_per_layer + 1);
        let (risk0, acc0) = eval_on_cache(
            &self.cache_train,
            &labels,
            &block,
            &aux,
            &bspec,
            &aspec,
            batch_size,
        );
        let (_, test_acc0) = eval_on_cache(
            &self.cache_test,
            &test_labels,
            &block,
            &aux,
            &bspec,
            &aspec,
            batch_size,
        );
        epochs.push(EpochStats {
            epoch: 0,
            lr: cfg.optim.lr_at(0),
            train_risk: risk0,
            train_acc: acc0,
            test_acc: test_acc0,
        });
        metrics.append(&Record::Epoch(EpochRecord {
            run_id: run_id.clone(),
            layer: j,
            epoch: 0,
            train_loss: risk0,
            train_acc: acc0,
            test_acc: test_acc0,
            lr: cfg.optim.lr_at(0),
            wall_time_s: started.elapsed().as_secs_f64(),
        }))?;

        let mut best_epoch = 0usize;
        let mut best_risk = risk0;
        let mut best_params = (block.clone(), aux.clone());

        for epoch in 1..=cfg.optim.epochs_per_layer {
            let lr = cfg.optim.lr_at(epoch - 1) as f32;
            let momentum = cfg.optim.momentum as f32;
            let mut shuffle_rng = stream_rng(cfg.seed, j, PURPOSE_SHUFFLE, epoch);
            let batches = training_batches(self.train.len(), batch_size, &mut shuffle_rng);
            let mut aug_rng = stream_rng(cfg.seed, j, PURPOSE_AUGMENT, epoch);

            for idx in &batches {
                let x = if cfg.augment {
                    // augmentation operates on raw images; rerun the frozen
                    // prefix on the augmented batch
                    let raw = gather_rows(&self.train.images, idx);
                    let augmented = augment_batch(&raw, &mut aug_rng);
                    forward_prefix(
                        &augmented,
                        &self.blocks,
                        &self.spec.blocks,
                        cfg.net.input_downsample,
                        j,
                    )
                } else {
                    self.cache_train.batch(idx)
                };
                let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

                let (out, btrace) = block_forward_train(&x, &mut block, &bspec);
                let (logits, atrace) = aux_forward_train(&out, &mut aux, &aspec);
                let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch_labels);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "layer {j} diverged at epoch {epoch}: non-finite loss"
                    )));
                }
                let (mut agrads, grad_out) = aux_backward(&aux, &atrace, &grad_logits);
                let mut bgrads = block_backward(&x, &out, &block, &btrace, &grad_out);
                if let Some(max) = cfg.optim.max_grad_norm {
                    clip_gradients(&mut bgrads, &mut agrads, max as f32);
                }
                apply_step(
                    &mut block,
                    &mut aux,
                    &mut opt,
                    &bgrads,
                    &agrads,
                    lr,
                    momentum,
                    cfg.optim.weight_decay as f32,
                    true,
                )
                .map_err(|e| Error::Numeric(format!("layer {j} epoch {epoch}: {e}")))?;
            }

            let (risk, acc) = eval_on_cache(
                &self.cache_train,
                &labels,
                &block,
                &aux,
                &bspec,
                &aspec,
                batch_size,
            );
            let (_, test_acc) = eval_on_cache(
                &self.cache_test,
                &test_labels,
                &block,
                &aux,
                &bspec,
                &aspec,
                batch_size,
            );
            epochs.push(EpochStats {
                epoch,
                lr: lr as f64,
                train_risk: risk,
                train_acc: acc,
                test_acc,
            });
            metrics.append(&Record::Epoch(EpochRecord {
                run_id: run_id.clone(),
                layer: j,
                epoch,
                train_loss: risk,
                train_acc: acc,
                test_acc,
                lr: lr as f64,
                wall_time_s: started.elapsed().as_secs_f64(),
            }))?;
            if risk < best_risk {
                best_risk = risk;
                best_epoch = epoch;
                best_params = (block.clone(), aux.clone());
            }
        }

        let (block, aux) = best_params;
        let (test_top1, test_top5) = {
            let mut correct = (0usize, 0usize);
            let n = self.cache_test.len();
            let mut start = 0;
            while start < n {
                let end = (start + batch_size).min(n);
                let idx: Vec<usize> = (start..end).collect();
                let x = self.cache_test.batch(&idx);
                let out = block_forward_eval(&x, &block, &bspec);
                let logits = aux_forward_eval(&out, &aux, &aspec);
                let (t1, t5) = topk_accuracy(&logits, &test_labels[start..end]);
                correct.0 += (t1 / 100.0 * (end - start) as f64).round() as usize;
                correct.1 += (t5 / 100.0 * (end - start) as f64).round() as usize;
                start = end;
            }
            (
                100.0 * correct.0 as f64 / n as f64,
                100.0 * correct.1 as f64 / n as f64,
            )
        };

        let result = LayerTrainResult {
            layer: j,
            best_epoch,
            train_risk: epochs[best_epoch].train_risk,
            train_acc: epochs[best_epoch].train_acc,
            test_top1,
            test_top5,
            identity_init: identity,
            wall_time_s: started.elapsed().as_secs_f64(),
            epochs,
        };
        metrics.append(&Record::LayerSummary(LayerSummaryRecord {
            run_id,
            layer: j,
            best_epoch: result.best_epoch,
            train_risk: result.train_risk,
            train_acc: result.train_acc,
            test_top1,
            test_top5,
            identity_candidate: identity,
            wall_time_s: result.wall_time_s,
        }))?;

        self.blocks.push(block);
        self.aux.push(aux);
        self.results.push(result);
        Ok(())
    }
}

fn gather_rows(images: &Array4<f32>, idx: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::<f32>::zeros((idx.len(), c, h, w));
    for (row, &i) in idx.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), row)
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    out
}

impl<'a> GreedyTrainer<'a> {
    /// Prune the most recently trained layer to `target_width`, fine-tune
    /// its auxiliary head, and propagate the reduced width to the next
    /// block's input. Must run before the caches advance.
    pub fn prune_last_layer(
        &mut self,
        target_width: usize,
        finetune_epochs: usize,
        metrics: &mut MetricsWriter,
    ) -> Result<crate::prune::PruneRecord> {
        let j = self.blocks.len().checked_sub(1).ok_or_else(|| {
            Error::Config("no trained layer to prune".into())
        })?;
        assert_eq!(self.cache_train.depth, j, "caches already advanced past layer {j}");
        let (block, aux, bspec, aspec, record) = crate::prune::prune_and_finetune(
            &self.blocks[j],
            &self.aux[j],
            &self.spec.blocks[j],
            &self.spec.aux[j],
            &self.cache_train,
            &self.train.labels,
            &self.cache_test,
            &self.test.labels,
            target_width,
            finetune_epochs,
            &self.cfg.optim,
            self.cfg.seed,
        )?;
        self.blocks[j] = block;
        self.aux[j] = aux;
        self.spec.blocks[j] = bspec;
        self.spec.aux[j] = aspec;
        if j + 1 < self.spec.depth() {
            let next = &mut self.spec.blocks[j + 1];
            next.in_width = target_width;
            next.conv_in = match next.downsample {
                Some(crate::arch::DownsampleKind::Invertible) => target_width * 4,
                _ => target_width,
            };
        }
        metrics.append(&Record::Prune(record.clone()))?;
        Ok(record)
    }
}

/// Greedy training with in-loop compression: after each layer trains, prune
/// it to `target_width` and fine-tune its head before the next layer starts.
pub fn train_greedy_pruned(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    target_width: usize,
    finetune_epochs: usize,
    metrics: &mut MetricsWriter,
    checkpoint_dir: Option<&Path>,
) -> Result<(GreedyNet, Vec<crate::prune::PruneRecord>)> {
    let cache_dir = checkpoint_dir.map(|d| d.join("cache"));
    let mut trainer = GreedyTrainer::new(cfg, train, test, cache_dir.as_deref())?;
    let mut records = Vec::new();
    for j in 0..trainer.spec.depth() {
        trainer.train_layer(j, metrics)?;
        records.push(trainer.prune_last_layer(target_width, finetune_epochs, metrics)?);
        if let Some(dir) = checkpoint_dir {
            crate::checkpoint::save(&trainer.net(), &dir.join("checkpoint.glwc"))?;
        }
        if j + 1 < trainer.spec.depth() {
            trainer.advance_caches()?;
        }
    }
    metrics.flush()?;
    Ok((trainer.net(), records))
}

/// Train a full greedy network.
pub fn train_greedy(
    cfg: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    metrics: &mut MetricsWriter,
    checkpoint_dir: Option<&Path>,
) -> Result<GreedyNet> {
    let cache_dir = checkpoint_dir.map(|d| d.join("cache"));
    let mut trainer = GreedyTrainer::new(cfg, train, test, cache_dir.as_deref())?;
    trainer.run(metrics, checkpoint_dir)
}

/// Top-1/top-5 accuracy of the depth-`layer` auxiliary output over a
/// dataset, streaming batches through the full forward pass.
pub fn evaluate(net: &GreedyNet, data: &LabeledDataset, layer: usize, batch_size: usize) -> (f64, f64) {
    assert!(layer < net.trained_layers(), "layer {layer} not trained");
    let n = data.len();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = gather_rows(&data.images, &idx);
        let feats = forward_prefix(
            &x,
            &net.blocks,
            &net.spec.blocks,
            net.spec.input_downsample,
            layer + 1,
        );
        let logits = aux_forward_eval(&feats, &net.aux[layer], &net.spec.aux[layer]);
        let (t1, t5) = topk_accuracy(&logits, &data.labels[start..end]);
        top1 += (t1 / 100.0 * (end - start) as f64).round() as usize;
        top5 += (t5 / 100.0 * (end - start) as f64).round() as usize;
        start = end;
    }
    (100.0 * top1 as f64 / n as f64, 100.0 * top5 as f64 / n as f64)
}

/// Ensemble combination over all layers: `Z = sum_j 2^j p_j` with `p_j` the
/// post-softmax probabilities of layer j's head (1-based j, unnormalized
/// weights; the argmax is scale-invariant).
pub fn ensemble_logits(net: &GreedyNet, x_raw: &Array4<f32>) -> Array2<f64> {
    assert_eq!(
        net.trained_layers(),
        net.spec.depth(),
        "ensemble needs all layers trained"
    );
    let n = x_raw.dim().0;
    let mut z = Array2::<f64>::zeros((n, net.spec.class_count));
    let mut cur = if net.spec.input_downsample {
        invertible_downsample(x_raw)
    } else {
        x_raw.clone()
    };
    for j in 0..net.trained_layers() {
        cur = block_forward_eval(&cur, &net.blocks[j], &net.spec.blocks[j]);
        let logits = aux_forward_eval(&cur, &net.aux[j], &net.spec.aux[j]);
        let probs = softmax_probs(&logits);
        let weight = 2f64.powi(j as i32 + 1);
        for (mut zrow, prow) in z.outer_iter_mut().zip(probs.outer_iter()) {
            for (zv, &pv) in zrow.iter_mut().zip(prow.iter()) {
                *zv += weight * pv as f64;
            }
        }
    }
    z
}

/// Ensemble top-1/top-5 accuracy over a dataset.
pub fn ensemble_evaluate(net: &GreedyNet, data: &LabeledDataset, batch_size: usize) -> (f64, f64) {
    let n = data.len();
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let x = gather_rows(&data.images, &idx);
        let z = ensemble_logits(net, &x);
        let (t1, t5) = topk_accuracy(&z, &data.labels[start..end]);
        top1 += (t1 / 100.0 * (end - start) as f64).round() as usize;
        top5 += (t5 / 100.0 * (end - start) as f64).round() as usize;
        start = end;
    }
    (100.0 * top1 as f64 / n as f64, 100.0 * top5 as f64 / n as f64)
}
