//! Traced forward and backward passes through one block and its auxiliary
//! head. Backward passes are hand-derived compositions of the kernel
//! adjoints; there is no general-purpose autodiff here.

use ndarray::{Array1, Array2, Array4};

use crate::arch::{AuxSpec, BlockSpec, DownsampleKind};
use crate::kernels::{
    avg_pool2, avg_pool2_backward, avg_quadrants, avg_quadrants_backward, batchnorm_backward,
    batchnorm_forward, conv2d, conv2d_backward, conv2d_backward_params, invertible_downsample,
    linear, linear_backward, max_pool2, relu_backward, relu_in_place, BnCache, BnMode,
};
use crate::params::{AuxParams, BlockParams, ConvParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn bn(self) -> BnMode {
        match self {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval,
        }
    }
}

fn conv_stride(spec_ds: Option<DownsampleKind>) -> usize {
    if spec_ds == Some(DownsampleKind::Stride) {
        2
    } else {
        1
    }
}

/// Apply the block's downsampling operator; `None` means the input feeds
/// the convolution unchanged (identity P, or stride folded into the conv).
fn apply_downsample<A: Scalar>(x: &Tensor<A>, ds: Option<DownsampleKind>) -> Option<Tensor<A>> {
    match ds {
        Some(DownsampleKind::Invertible) => Some(invertible_downsample(x)),
        Some(DownsampleKind::AvgPool) => Some(avg_pool2(x)),
        Some(DownsampleKind::MaxPool) => Some(max_pool2(x).0),
        Some(DownsampleKind::Stride) | None => None,
    }
}

/// Values the block backward pass needs beyond the block input and output.
pub struct BlockTrace<A> {
    /// Input to the convolution when the downsampler materializes one;
    /// `None` means the original block input feeds the conv directly.
    conv_in: Option<Tensor<A>>,
    bn_cache: Option<BnCache<A>>,
    stride: usize,
}

/// Gradients for one block's trainable parameters.
pub struct BlockGrads<A> {
    pub kernel: Array4<A>,
    pub bias: Array1<A>,
    pub bn: Option<(Array1<A>, Array1<A>)>,
}

/// `x_{j+1} = relu(bn?(conv(P_j x_j)))`, recording what backward needs.
/// Training mode updates batch-norm running statistics in place.
pub fn block_forward_train<A: Scalar>(
    x: &Tensor<A>,
    params: &mut BlockParams<A>,
    spec: &BlockSpec,
) -> (Tensor<A>, BlockTrace<A>) {
    let stride = conv_stride(spec.downsample);
    let ds = apply_downsample(x, spec.downsample);
    let conv_in = ds.as_ref().unwrap_or(x);
    let mut y = conv2d(conv_in, &params.conv, 1, stride);
    let bn_cache = match params.bn.as_mut() {
        Some(bn) => {
            let (out, cache) = batchnorm_forward(&y, bn, BnMode::Train);
            y = out;
            cache
        }
        None => None,
    };
    relu_in_place(&mut y);
    (
        y,
        BlockTrace {
            conv_in: ds,
            bn_cache,
            stride,
        },
    )
}

/// Forward without trace; eval-mode batch norm.
pub fn block_forward_eval<A: Scalar>(
    x: &Tensor<A>,
    params: &BlockParams<A>,
    spec: &BlockSpec,
) -> Tensor<A> {
    let stride = conv_stride(spec.downsample);
    let ds = apply_downsample(x, spec.downsample);
    let conv_in = ds.as_ref().unwrap_or(x);
    let mut y = conv2d(conv_in, &params.conv, 1, stride);
    if let Some(bn) = &params.bn {
        // running stats are read-only in eval mode
        let mut bn = bn.clone();
        let (out, _) = batchnorm_forward(&y, &mut bn, BnMode::Eval);
        y = out;
    }
    relu_in_place(&mut y);
    y
}

/// Parameter gradients for the block. `output` is the tensor returned by
/// `block_forward_train` (its sign pattern is the ReLU mask). The gradient
/// w.r.t. the block input is never needed: everything upstream is frozen.
pub fn block_backward<A: Scalar>(
    x: &Tensor<A>,
    output: &Tensor<A>,
    params: &BlockParams<A>,
    trace: &BlockTrace<A>,
    grad_out: &Tensor<A>,
) -> BlockGrads<A> {
    let mut g = relu_backward(output, grad_out);
    let bn_grads = match (&params.bn, &trace.bn_cache) {
        (Some(bn), Some(cache)) => {
            let (gx, gs, gb) = batchnorm_backward(bn, cache, &g);
            g = gx;
            Some((gs, gb))
        }
        (None, None) => None,
        _ => unreachable!("batch-norm trace/params mismatch"),
    };
    let conv_in = trace.conv_in.as_ref().unwrap_or(x);
    let (gk, gb) = conv2d_backward_params(conv_in, &params.conv, &g, 1, trace.stride);
    BlockGrads {
        kernel: gk,
        bias: gb,
        bn: bn_grads,
    }
}

/// Values the auxiliary-head backward pass needs.
pub struct AuxTrace<A> {
    /// Input to each auxiliary convolution; `inputs[0]` is the head input
    /// after the optional pre-pool.
    inputs: Vec<Tensor<A>>,
    /// Post-ReLU output of each auxiliary convolution (ReLU masks).
    acts: Vec<Tensor<A>>,
    bn_caches: Vec<Option<BnCache<A>>>,
    /// Flattened quadrant-averaged features entering the head.
    pooled_flat: Array2<A>,
    /// Spatial size entering the quadrant average.
    pooled_hw: (usize, usize),
    prepooled: bool,
}

pub struct AuxGrads<A> {
    pub convs: Vec<(Array4<A>, Array1<A>)>,
    pub bns: Vec<Option<(Array1<A>, Array1<A>)>>,
    pub head_w: Array2<A>,
    pub head_b: Array1<A>,
}

fn pool_and_flatten<A: Scalar>(x: &Tensor<A>) -> Array2<A> {
    let pooled = avg_quadrants(x);
    let (n, c, _, _) = pooled.dim();
    pooled.into_shape((n, c * 4)).unwrap()
}

/// `z = L A relu(bn?(W~_{k-2} ... relu(bn?(W~_0 x))))`; `k = 1` is the purely
/// linear head `L A x`.
pub fn aux_forward_train<A: Scalar>(
    x: &Tensor<A>,
    params: &mut AuxParams<A>,
    spec: &AuxSpec,
) -> (Array2<A>, AuxTrace<A>) {
    aux_forward_impl(x, params, spec, Mode::Train)
}

pub fn aux_forward_eval<A: Scalar>(
    x: &Tensor<A>,
    params: &AuxParams<A>,
    spec: &AuxSpec,
) -> Array2<A> {
    // eval never mutates; clone the small BN state to reuse the impl
    let mut p = params.clone();
    aux_forward_impl(x, &mut p, spec, Mode::Eval).0
}

fn aux_forward_impl<A: Scalar>(
    x: &Tensor<A>,
    params: &mut AuxParams<A>,
    spec: &AuxSpec,
    mode: Mode,
) -> (Array2<A>, AuxTrace<A>) {
    assert_eq!(
        x.dim().1,
        spec.in_width,
        "aux_forward: input width {} does not match head spec {}",
        x.dim().1,
        spec.in_width
    );
    assert_eq!(params.convs.len(), spec.conv_count(), "aux_forward: conv count mismatch");

    let mut inputs = Vec::with_capacity(params.convs.len());
    let mut acts = Vec::with_capacity(params.convs.len());
    let mut bn_caches = Vec::with_capacity(params.convs.len());

    let mut cur = if spec.prepool { avg_pool2(x) } else { x.clone() };
    for (conv, bn) in params.convs.iter().zip(params.bns.iter_mut()) {
        inputs.push(cur.clone());
        let mut y = conv2d(&cur, conv, 1, 1);
        let cache = match bn.as_mut() {
            Some(bn) => {
                let (out, cache) = batchnorm_forward(&y, bn, mode.bn());
                y = out;
                cache
            }
            None => None,
        };
        relu_in_place(&mut y);
        acts.push(y.clone());
        bn_caches.push(cache);
        cur = y;
    }

    let pooled_hw = (cur.dim().2, cur.dim().3);
    let pooled_flat = pool_and_flatten(&cur);
    let logits = linear(&pooled_flat, &params.head);
    (
        logits,
        AuxTrace {
            inputs,
            acts,
            bn_caches,
            pooled_flat,
            pooled_hw,
            prepooled: spec.prepool,
        },
    )
}

/// Gradients for the head parameters plus the gradient w.r.t. the head input
/// (needed to reach the block being trained, and by filter ranking).
pub fn aux_backward<A: Scalar>(
    params: &AuxParams<A>,
    trace: &AuxTrace<A>,
    grad_logits: &Array2<A>,
) -> (AuxGrads<A>, Tensor<A>) {
    let (g_flat, head_w, head_b) = linear_backward(&trace.pooled_flat, &params.head, grad_logits);
    let n = g_flat.dim().0;
    let c = g_flat.dim().1 / 4;
    let g_pooled = g_flat.into_shape((n, c, 2, 2)).unwrap();
    let mut g = avg_quadrants_backward(&g_pooled, trace.pooled_hw);

    let mut convs = vec![None; params.convs.len()];
    let mut bns: Vec<Option<(Array1<A>, Array1<A>)>> = vec![None; params.convs.len()];
    for i in (0..params.convs.len()).rev() {
        g = relu_backward(&trace.acts[i], &g);
        if let (Some(bn), Some(cache)) = (&params.bns[i], &trace.bn_caches[i]) {
            let (gx, gs, gb) = batchnorm_backward(bn, cache, &g);
            g = gx;
            bns[i] = Some((gs, gb));
        }
        let (gx, gk, gbias) = conv2d_backward(&trace.inputs[i], &params.convs[i], &g, 1, 1);
        convs[i] = Some((gk, gbias));
        g = gx;
    }
    if trace.prepooled {
        g = avg_pool2_backward(&g);
    }
    (
        AuxGrads {
            convs: convs.into_iter().map(Option::unwrap).collect(),
            bns,
            head_w,
            head_b,
        },
        g,
    )
}

/// Run the raw input through the optional input downsampling and the first
/// `depth` frozen blocks (eval mode).
pub fn forward_prefix<A: Scalar>(
    x: &Tensor<A>,
    blocks: &[BlockParams<A>],
    specs: &[BlockSpec],
    input_downsample: bool,
    depth: usize,
) -> Tensor<A> {
    assert!(depth <= blocks.len());
    let mut cur = if input_downsample {
        invertible_downsample(x)
    } else {
        x.clone()
    };
    for j in 0..depth {
        cur = block_forward_eval(&cur, &blocks[j], &specs[j]);
    }
    cur
}

/// Initialize block parameters for a spec.
pub fn init_block<A: Scalar, R: rand::Rng>(
    rng: &mut R,
    spec: &BlockSpec,
) -> BlockParams<A> {
    BlockParams {
        conv: crate::params::init_conv(rng, spec.out_width, spec.conv_in),
        bn: spec
            .batchnorm
            .then(|| crate::params::BatchNormParams::new(spec.out_width)),
    }
}

/// Initialize auxiliary-head parameters for a spec.
pub fn init_aux<A: Scalar, R: rand::Rng>(rng: &mut R, spec: &AuxSpec) -> AuxParams<A> {
    let mut convs = Vec::new();
    let mut bns = Vec::new();
    let mut c_in = spec.in_width;
    for _ in 0..spec.conv_count() {
        convs.push(crate::params::init_conv(rng, spec.width, c_in));
        bns.push(spec.batchnorm.then(|| crate::params::BatchNormParams::new(spec.width)));
        c_in = spec.width;
    }
    AuxParams {
        convs,
        bns,
        head: crate::params::init_linear(rng, spec.classes, spec.head_dim()),
    }
}

/// The identity warm-start block: delta kernel, zero bias, no batch norm.
/// Composed with ReLU on the non-negative cached activations this reproduces
/// the previous layer's representation exactly.
pub fn identity_block<A: Scalar>(width: usize) -> BlockParams<A> {
    BlockParams {
        conv: ConvParams::identity(width),
        bn: None,
    }
}

/// Mean top-1 / top-5 accuracy (percent) of logits against labels.
pub fn topk_accuracy<A: Scalar>(logits: &Array2<A>, labels: &[usize]) -> (f64, f64) {
    let (n, classes) = logits.dim();
    assert_eq!(labels.len(), n);
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for (row, &label) in logits.outer_iter().zip(labels.iter()) {
        let target = row[label];
        // rank = how many classes score strictly higher (ties favor the label)
        let higher = row.iter().filter(|&&v| v > target).count();
        if higher == 0 {
            top1 += 1;
        }
        if higher < 5.min(classes) {
            top5 += 1;
        }
    }
    (
        100.0 * top1 as f64 / n as f64,
        100.0 * top5 as f64 / n as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_network, NetConfig};
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
    }

    fn plain_spec(j: usize, width: usize, hw: usize) -> BlockSpec {
        BlockSpec {
            index: j,
            downsample: None,
            in_width: width,
            conv_in: width,
            out_width: width,
            batchnorm: false,
            spatial_in: (hw, hw),
            spatial_out: (hw, hw),
        }
    }

    #[test]
    fn identity_block_reproduces_nonnegative_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn4(&mut rng, (2, 3, 6, 6)).mapv(f64::abs);
        let mut params = identity_block::<f64>(3);
        let spec = plain_spec(1, 3, 6);
        let (y, _) = block_forward_train(&x, &mut params, &spec);
        assert_eq!(y, x);
    }

    #[test]
    fn block_output_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn4(&mut rng, (2, 3, 6, 6));
        let spec = plain_spec(0, 3, 6);
        let mut params = init_block::<f64, _>(&mut rng, &spec);
        let (y, _) = block_forward_train(&x, &mut params, &spec);
        assert!(y.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn imagenet_k23_block3_shape_transition() {
        // block index 2 (zero-based) takes 128x112x112 to 256x56x56
        let cfg = crate::config::TrainConfig::preset("imagenet-k23").unwrap();
        let spec = build_network(&cfg.net).unwrap();
        let b = &spec.blocks[2];
        assert_eq!((b.in_width, b.spatial_in), (128, (112, 112)));
        assert_eq!((b.out_width, b.spatial_out), (256, (56, 56)));
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Array4::<f32>::from_shape_simple_fn((1, 128, 112, 112), || {
            { let v: f64 = StandardNormal.sample(&mut rng); v as f32 }
        });
        let params = init_block::<f32, _>(&mut rng, b);
        let y = block_forward_eval(&x, &params, b);
        assert_eq!(y.dim(), (1, 256, 56, 56));
    }

    #[test]
    fn k1_aux_head_shapes_and_zero_weight_bias() {
        let spec = AuxSpec {
            k: 1,
            width: 0,
            batchnorm: false,
            in_width: 256,
            classes: 10,
            prepool: false,
            spatial: (16, 16),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = randn4(&mut rng, (3, 256, 16, 16));
        let mut params = init_aux::<f64, _>(&mut rng, &spec);
        assert!(params.convs.is_empty());
        let (logits, _) = aux_forward_train(&x, &mut params, &spec);
        assert_eq!(logits.dim(), (3, 10));

        params.head.weight.fill(0.0);
        for (i, b) in params.head.bias.iter_mut().enumerate() {
            *b = i as f64;
        }
        let logits = aux_forward_eval(&x, &params, &spec);
        for row in logits.outer_iter() {
            for (i, &v) in row.iter().enumerate() {
                assert_eq!(v, i as f64);
            }
        }
    }

    #[test]
    fn k1_aux_is_affine_in_its_input() {
        let spec = AuxSpec {
            k: 1,
            width: 0,
            batchnorm: false,
            in_width: 8,
            classes: 5,
            prepool: false,
            spatial: (4, 4),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = init_aux::<f64, _>(&mut rng, &spec);
        let x = randn4(&mut rng, (2, 8, 4, 4));
        let y = randn4(&mut rng, (2, 8, 4, 4));
        let zero = Array4::<f64>::zeros((2, 8, 4, 4));
        let (alpha, beta) = (1.7, -0.6);
        let lhs = aux_forward_eval(&(&x * alpha + &y * beta), &params, &spec);
        let fx = aux_forward_eval(&x, &params, &spec);
        let fy = aux_forward_eval(&y, &params, &spec);
        let f0 = aux_forward_eval(&zero, &params, &spec);
        let rhs = &fx * alpha + &fy * beta - &f0 * (alpha + beta - 1.0);
        let max_diff = lhs
            .iter()
            .zip(rhs.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "affine deviation {max_diff}");
    }

    #[test]
    fn top5_always_at_least_top1() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..10 {
            let logits = ndarray::Array2::<f64>::from_shape_simple_fn((50, 10), || {
                StandardNormal.sample(&mut rng)
            });
            let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
            let (t1, t5) = topk_accuracy(&logits, &labels);
            assert!(t5 >= t1);
        }
    }
}
