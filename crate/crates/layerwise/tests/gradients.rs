//! Finite-difference verification of every backward kernel at f64.
//!
//! Probe inputs stay away from ReLU kinks by a margin larger than the
//! difference step; relative error must stay below 1e-5 everywhere (1e-8
//! for purely linear paths).

use layerwise::arch::{AuxSpec, BlockSpec};
use layerwise::forward::{
    aux_backward, aux_forward_train, block_backward, block_forward_train, init_aux, init_block,
};
use layerwise::gradcheck::{grad_check, grad_check_sampled, DEFAULT_EPS};
use layerwise::kernels::{
    avg_quadrants, avg_quadrants_backward, batchnorm_backward, batchnorm_forward, conv2d,
    conv2d_backward, linear, linear_backward, relu, relu_backward, softmax_cross_entropy, BnMode,
};
use layerwise::params::{BatchNormParams, ConvParams, LinearParams};
use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Push values away from the ReLU kink by the stated margin.
fn away_from_kink(t: &mut Array4<f64>, margin: f64) {
    t.mapv_inplace(|v| {
        if v.abs() < margin {
            if v >= 0.0 {
                v + margin
            } else {
                v - margin
            }
        } else {
            v
        }
    });
}

/// Scalar functional over a tensor for cotangent-side checks.
fn weighted_sum(t: &Array4<f64>, w: &Array4<f64>) -> f64 {
    t.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv2d_input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for trial in 0..6 {
        let stride = if trial % 3 == 0 { 2 } else { 1 };
        let x = randn4(&mut rng, (2, 3, 6, 6));
        let p = ConvParams {
            kernel: randn4(&mut rng, (4, 3, 3, 3)),
            bias: Array1::from_shape_simple_fn(4, || StandardNormal.sample(&mut rng)),
        };
        let out_shape = conv2d(&x, &p, 1, stride).dim();
        let cotangent = randn4(&mut rng, out_shape);
        let (gx, _, _) = conv2d_backward(&x, &p, &cotangent, 1, stride);

        let mut flat: Vec<f64> = x.iter().copied().collect();
        let analytic: Vec<f64> = gx.iter().copied().collect();
        let shape = x.dim();
        let p2 = p.clone();
        let ct = cotangent.clone();
        let err = grad_check(
            &mut flat,
            &analytic,
            |vals| {
                let xt = Array4::from_shape_vec(shape, vals.to_vec()).unwrap();
                weighted_sum(&conv2d(&xt, &p2, 1, stride), &ct)
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "trial {trial} (stride {stride}): rel err {err}");
    }
}

#[test]
fn conv2d_kernel_and_bias_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let x = randn4(&mut rng, (2, 2, 5, 5));
    let kernel = randn4(&mut rng, (3, 2, 3, 3));
    let bias = Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));
    let p = ConvParams {
        kernel: kernel.clone(),
        bias: bias.clone(),
    };
    let cotangent = randn4(&mut rng, (2, 3, 5, 5));
    let (_, gk, gb) = conv2d_backward(&x, &p, &cotangent, 1, 1);

    let mut kflat: Vec<f64> = kernel.iter().copied().collect();
    let kanalytic: Vec<f64> = gk.iter().copied().collect();
    let kshape = kernel.dim();
    let err = grad_check(
        &mut kflat,
        &kanalytic,
        |vals| {
            let pk = ConvParams {
                kernel: Array4::from_shape_vec(kshape, vals.to_vec()).unwrap(),
                bias: bias.clone(),
            };
            weighted_sum(&conv2d(&x, &pk, 1, 1), &cotangent)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-8, "kernel rel err {err}");

    let mut bflat: Vec<f64> = bias.iter().copied().collect();
    let banalytic: Vec<f64> = gb.iter().copied().collect();
    let err = grad_check(
        &mut bflat,
        &banalytic,
        |vals| {
            let pb = ConvParams {
                kernel: kernel.clone(),
                bias: Array1::from_vec(vals.to_vec()),
            };
            weighted_sum(&conv2d(&x, &pb, 1, 1), &cotangent)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-8, "bias rel err {err}");
}

#[test]
fn relu_composite_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut x = randn4(&mut rng, (2, 3, 4, 4));
    away_from_kink(&mut x, 1e-3);
    let cotangent = randn4(&mut rng, (2, 3, 4, 4));
    let gx = relu_backward(&x, &cotangent);

    let mut flat: Vec<f64> = x.iter().copied().collect();
    let analytic: Vec<f64> = gx.iter().copied().collect();
    let shape = x.dim();
    let err = grad_check(
        &mut flat,
        &analytic,
        |vals| {
            let xt = Array4::from_shape_vec(shape, vals.to_vec()).unwrap();
            weighted_sum(&relu(&xt), &cotangent)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn avg_quadrants_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let x = randn4(&mut rng, (2, 2, 6, 4));
    let cotangent = randn4(&mut rng, (2, 2, 2, 2));
    let gx = avg_quadrants_backward(&cotangent, (6, 4));

    let mut flat: Vec<f64> = x.iter().copied().collect();
    let analytic: Vec<f64> = gx.iter().copied().collect();
    let shape = x.dim();
    let err = grad_check(
        &mut flat,
        &analytic,
        |vals| {
            let xt = Array4::from_shape_vec(shape, vals.to_vec()).unwrap();
            weighted_sum4_2(&avg_quadrants(&xt), &cotangent)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-8, "rel err {err}");
}

fn weighted_sum4_2(t: &Array4<f64>, w: &Array4<f64>) -> f64 {
    t.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let x = Array2::<f64>::from_shape_simple_fn((4, 6), || StandardNormal.sample(&mut rng));
    let weight = Array2::<f64>::from_shape_simple_fn((3, 6), || StandardNormal.sample(&mut rng));
    let bias = Array1::<f64>::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));
    let p = LinearParams {
        weight: weight.clone(),
        bias: bias.clone(),
    };
    let labels = [0usize, 1, 2, 0];

    // end-to-end through softmax cross-entropy
    let logits = linear(&x, &p);
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels);
    let (gx, gw, gb) = linear_backward(&x, &p, &grad_logits);

    let loss_for = |xv: &Array2<f64>, pv: &LinearParams<f64>| -> f64 {
        let (loss, _) = softmax_cross_entropy(&linear(xv, pv), &labels);
        loss
    };

    let mut flat: Vec<f64> = x.iter().copied().collect();
    let analytic: Vec<f64> = gx.iter().copied().collect();
    let err = grad_check(
        &mut flat,
        &analytic,
        |vals| loss_for(&Array2::from_shape_vec((4, 6), vals.to_vec()).unwrap(), &p),
        DEFAULT_EPS,
    );
    assert!(err < 1e-6, "input rel err {err}");

    let mut wflat: Vec<f64> = weight.iter().copied().collect();
    let wanalytic: Vec<f64> = gw.iter().copied().collect();
    let err = grad_check(
        &mut wflat,
        &wanalytic,
        |vals| {
            let pv = LinearParams {
                weight: Array2::from_shape_vec((3, 6), vals.to_vec()).unwrap(),
                bias: bias.clone(),
            };
            loss_for(&x, &pv)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-6, "weight rel err {err}");

    let mut bflat: Vec<f64> = bias.iter().copied().collect();
    let banalytic: Vec<f64> = gb.iter().copied().collect();
    let err = grad_check(
        &mut bflat,
        &banalytic,
        |vals| {
            let pv = LinearParams {
                weight: weight.clone(),
                bias: Array1::from_vec(vals.to_vec()),
            };
            loss_for(&x, &pv)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-6, "bias rel err {err}");
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    for _ in 0..5 {
        let logits =
            Array2::<f64>::from_shape_simple_fn((3, 10), || StandardNormal.sample(&mut rng));
        let labels = [3usize, 7, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        let mut flat: Vec<f64> = logits.iter().copied().collect();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        let err = grad_check(
            &mut flat,
            &analytic,
            |vals| {
                let l = Array2::from_shape_vec((3, 10), vals.to_vec()).unwrap();
                softmax_cross_entropy(&l, &labels).0
            },
            DEFAULT_EPS,
        );
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let x = randn4(&mut rng, (6, 3, 4, 4));
    let cotangent = randn4(&mut rng, (6, 3, 4, 4));
    let mut p = BatchNormParams::<f64>::new(3);
    p.scale = Array1::from_shape_simple_fn(3, || {
        let v: f64 = StandardNormal.sample(&mut rng);
        1.0 + 0.3 * v
    });
    p.shift = Array1::from_shape_simple_fn(3, || StandardNormal.sample(&mut rng));

    let forward_loss = |xv: &Array4<f64>, pv: &BatchNormParams<f64>| -> f64 {
        let mut pv = pv.clone();
        let (out, _) = batchnorm_forward(xv, &mut pv, BnMode::Train);
        weighted_sum(&out, &cotangent)
    };

    let (_, cache) = batchnorm_forward(&x, &mut p.clone(), BnMode::Train);
    let cache = cache.unwrap();
    let (gx, gs, gb) = batchnorm_backward(&p, &cache, &cotangent);

    let mut flat: Vec<f64> = x.iter().copied().collect();
    let analytic: Vec<f64> = gx.iter().copied().collect();
    let shape = x.dim();
    let err = grad_check_sampled(
        &mut flat,
        &analytic,
        |vals| {
            let xt = Array4::from_shape_vec(shape, vals.to_vec()).unwrap();
            forward_loss(&xt, &p)
        },
        DEFAULT_EPS,
        120,
        7,
    );
    assert!(err < 1e-5, "input rel err {err}");

    let mut sflat: Vec<f64> = p.scale.iter().copied().collect();
    let sanalytic: Vec<f64> = gs.iter().copied().collect();
    let err = grad_check(
        &mut sflat,
        &sanalytic,
        |vals| {
            let mut pv = p.clone();
            pv.scale = Array1::from_vec(vals.to_vec());
            forward_loss(&x, &pv)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-5, "scale rel err {err}");

    let mut bflat: Vec<f64> = p.shift.iter().copied().collect();
    let banalytic: Vec<f64> = gb.iter().copied().collect();
    let err = grad_check(
        &mut bflat,
        &banalytic,
        |vals| {
            let mut pv = p.clone();
            pv.shift = Array1::from_vec(vals.to_vec());
            forward_loss(&x, &pv)
        },
        DEFAULT_EPS,
    );
    assert!(err < 1e-5, "shift rel err {err}");
}

/// Smallest |pre-ReLU| value anywhere in the composite: finite differences
/// are only trustworthy when every activation sits clear of its kink by a
/// margin larger than any probe-induced shift.
fn composite_kink_margin(
    block0: &layerwise::params::BlockParams<f64>,
    aux0: &layerwise::params::AuxParams<f64>,
    bspec: &BlockSpec,
    x: &Array4<f64>,
) -> f64 {
    let mut margin = f64::INFINITY;
    let mut track = |t: &Array4<f64>| {
        for &v in t.iter() {
            margin = margin.min(v.abs());
        }
    };
    let mut pre = conv2d(x, &block0.conv, 1, 1);
    if let Some(bn) = &block0.bn {
        let mut bn = bn.clone();
        pre = batchnorm_forward(&pre, &mut bn, BnMode::Train).0;
    }
    track(&pre);
    let _ = bspec;
    let mut cur = relu(&pre);
    for (conv, bn) in aux0.convs.iter().zip(aux0.bns.iter()) {
        let mut pre = conv2d(&cur, conv, 1, 1);
        if let Some(bn) = bn {
            let mut bn = bn.clone();
            pre = batchnorm_forward(&pre, &mut bn, BnMode::Train).0;
        }
        track(&pre);
        cur = relu(&pre);
    }
    margin
}

/// Full composite: block (conv [+bn] + relu) and k-hidden-layer auxiliary
/// head down to the cross-entropy loss, gradients w.r.t. every parameter of
/// the block and the head. Seeds whose activations graze a ReLU kink are
/// skipped (the check requires a clean margin around every kink).
fn check_block_aux_composite(k: usize, batchnorm: bool, seed: u64) -> f64 {
    let bspec = BlockSpec {
        index: 0,
        downsample: None,
        in_width: 2,
        conv_in: 2,
        out_width: 4,
        batchnorm,
        spatial_in: (4, 4),
        spatial_out: (4, 4),
    };
    let aspec = AuxSpec {
        k,
        width: 3,
        batchnorm,
        in_width: 4,
        classes: 3,
        prepool: false,
        spatial: (4, 4),
    };
    let (block0, aux0, x) = {
        let mut chosen = None;
        for attempt in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
            let block0 = init_block::<f64, _>(&mut rng, &bspec);
            let aux0 = init_aux::<f64, _>(&mut rng, &aspec);
            let mut x = randn4(&mut rng, (4, 2, 4, 4));
            away_from_kink(&mut x, 2e-3);
            if composite_kink_margin(&block0, &aux0, &bspec, &x) > 5e-4 {
                chosen = Some((block0, aux0, x));
                break;
            }
        }
        chosen.expect("no kink-free instance found in 100 attempts")
    };
    let labels = [0usize, 1, 2, 1];

    // analytic gradients
    let mut block = block0.clone();
    let mut aux = aux0.clone();
    let (out, btrace) = block_forward_train(&x, &mut block, &bspec);
    let (logits, atrace) = aux_forward_train(&out, &mut aux, &aspec);
    let (_, grad_logits) = softmax_cross_entropy(&logits, &labels);
    let (agrads, grad_out) = aux_backward(&aux, &atrace, &grad_logits);
    let bgrads = block_backward(&x, &out, &block, &btrace, &grad_out);

    // pack every parameter into one flat vector
    let mut theta: Vec<f64> = Vec::new();
    let mut analytic: Vec<f64> = Vec::new();
    theta.extend(block0.conv.kernel.iter());
    analytic.extend(bgrads.kernel.iter());
    theta.extend(block0.conv.bias.iter());
    analytic.extend(bgrads.bias.iter());
    if let (Some(bn), Some((gs, gb))) = (&block0.bn, &bgrads.bn) {
        theta.extend(bn.scale.iter());
        analytic.extend(gs.iter());
        theta.extend(bn.shift.iter());
        analytic.extend(gb.iter());
    }
    for (i, conv) in aux0.convs.iter().enumerate() {
        theta.extend(conv.kernel.iter());
        analytic.extend(agrads.convs[i].0.iter());
        theta.extend(conv.bias.iter());
        analytic.extend(agrads.convs[i].1.iter());
        if let (Some(bn), Some((gs, gb))) = (&aux0.bns[i], &agrads.bns[i]) {
            theta.extend(bn.scale.iter());
            analytic.extend(gs.iter());
            theta.extend(bn.shift.iter());
            analytic.extend(gb.iter());
        }
    }
    theta.extend(aux0.head.weight.iter());
    analytic.extend(agrads.head_w.iter());
    theta.extend(aux0.head.bias.iter());
    analytic.extend(agrads.head_b.iter());

    let unpack_and_loss = |vals: &[f64]| -> f64 {
        let mut block = block0.clone();
        let mut aux = aux0.clone();
        let mut pos = 0usize;
        let mut read = |dst: &mut [f64]| {
            dst.copy_from_slice(&vals[pos..pos + dst.len()]);
            pos += dst.len();
        };
        read(block.conv.kernel.as_slice_mut().unwrap());
        read(block.conv.bias.as_slice_mut().unwrap());
        if let Some(bn) = block.bn.as_mut() {
            read(bn.scale.as_slice_mut().unwrap());
            read(bn.shift.as_slice_mut().unwrap());
        }
        for i in 0..aux.convs.len() {
            read(aux.convs[i].kernel.as_slice_mut().unwrap());
            read(aux.convs[i].bias.as_slice_mut().unwrap());
            if let Some(bn) = aux.bns[i].as_mut() {
                read(bn.scale.as_slice_mut().unwrap());
                read(bn.shift.as_slice_mut().unwrap());
            }
        }
        read(aux.head.weight.as_slice_mut().unwrap());
        read(aux.head.bias.as_slice_mut().unwrap());
        let (out, _) = block_forward_train(&x, &mut block, &bspec);
        let (logits, _) = aux_forward_train(&out, &mut aux, &aspec);
        softmax_cross_entropy(&logits, &labels).0
    };

    grad_check_sampled(&mut theta, &analytic, unpack_and_loss, DEFAULT_EPS, 250, seed)
}

#[test]
fn k1_block_and_head_composite() {
    let err = check_block_aux_composite(1, false, 2001);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn k2_block_and_head_composite_with_batchnorm() {
    let err = check_block_aux_composite(2, true, 2002);
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn k3_block_and_head_composite_with_batchnorm() {
    let err = check_block_aux_composite(3, true, 2003);
    assert!(err < 1e-5, "rel err {err}");
}
