use super::*;
use crate::gradcheck::check_all;
use crate::rng::{seeded, uniform};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.data(p), &[1.0, 2.0, 3.0, 4.0]);

    let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let d = g.matmul(row, col).unwrap();
    assert_eq!(g.data(d), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = seeded(11);
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 2], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    let report = check_all(&[a, b], |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let wv = g.constant(w.clone());
        let s = g.mul(p, wv)?;
        g.sum(s)
    })
    .unwrap();
    assert!(report.max_rel_err() < 1e-6, "{report:?}");
}

#[test]
fn order_invariant_matmul_ignores_contraction_order() {
    let mut rng = seeded(3);
    let a = uniform(&mut rng, &[2, 7], -1.0, 1.0);
    let b = uniform(&mut rng, &[7, 3], -1.0, 1.0);
    let perm = [4usize, 0, 6, 2, 1, 5, 3];
    let ap = Tensor::from_fn(&[2, 7], |i| a.data()[(i / 7) * 7 + perm[i % 7]]);
    let bp = Tensor::from_fn(&[7, 3], |i| b.data()[perm[i / 3] * 3 + i % 3]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let (apv, bpv) = (g.constant(ap), g.constant(bp));
    let x = g.matmul_with(av, bv, Summation::OrderInvariant).unwrap();
    let y = g.matmul_with(apv, bpv, Summation::OrderInvariant).unwrap();
    assert_eq!(g.data(x), g.data(y));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2, 2], &[3.5, 3.5, 2.0, 6.0]));
    let s = g.softmax_rows(x).unwrap();
    let d = g.data(s);
    assert_eq!(&d[..2], &[0.5, 0.5]);
    assert!((d[2] - 0.017986).abs() < 1e-6);
    assert!((d[3] - 0.982014).abs() < 1e-6);
    // oracle: e^2 / (e^2 + e^6)
    let direct = 2f64.exp() / (2f64.exp() + 6f64.exp());
    assert!((d[2] - direct).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut rng = seeded(5);
    let x = uniform(&mut rng, &[6, 9], -20.0, 20.0);
    let shifted = Tensor::from_fn(&[6, 9], |i| x.data()[i] + 3.25 * (i / 9) as f64);
    let mut g = Graph::new();
    let (a, b) = (g.constant(x), g.constant(shifted));
    let sa = g.softmax_rows(a).unwrap();
    let sb = g.softmax_rows(b).unwrap();
    for row in g.data(sa).chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for (p, q) in g.data(sa).iter().zip(g.data(sb)) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient() {
    let mut rng = seeded(8);
    let x = uniform(&mut rng, &[3, 5], -2.0, 2.0);
    let w = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let r = check_all(&[x], |g, v| {
        let s = g.softmax_rows(v[0])?;
        let wv = g.constant(w.clone());
        let p = g.mul(s, wv)?;
        g.sum(p)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn pointwise_conv_scales() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.data(y), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn zero_kernel_gives_bias() {
    let mut rng = seeded(1);
    let mut g = Graph::new();
    let x = g.constant(uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = g.constant(Tensor::full(&[3], 5.0));
    let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 5, 5]);
    assert!(g.data(y).iter().all(|v| *v == 5.0));
}

#[test]
fn conv_output_extent_and_channel_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3, 9, 8]));
    let w = g.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 5, 4]);
    let bad = g.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, bad, None, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = seeded(21);
    let x = uniform(&mut rng, &[2, 3, 6, 7], -1.0, 1.0);
    let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[4], -1.0, 1.0);
    for stride in [1, 2] {
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, 1).unwrap();
        let s = g.shape(y).to_vec();
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..s[2] {
                    for ox in 0..s[3] {
                        let mut acc = b.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    let ix = (ox * stride + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 6 || ix >= 7 {
                                        continue;
                                    }
                                    acc += w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[((n * 3 + ci) * 6 + iy as usize) * 7 + ix as usize];
                                }
                            }
                        }
                        let got = g.data(y)[((n * 4 + co) * s[2] + oy) * s[3] + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv_gradient() {
    let mut rng = seeded(2);
    let x = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[3], -1.0, 1.0);
    let probe = uniform(&mut rng, &[1, 3, 3, 3], -1.0, 1.0);
    let r = check_all(&[x, w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let p = g.constant(probe.clone());
        let m = g.mul(y, p)?;
        g.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-5, "{r:?}");
}

#[test]
fn bilinear_examples() {
    let mut g = Graph::new();
    let c = g.constant(t(&[1, 1, 1, 1], &[7.0]));
    let up = g.bilinear_resize(c, 2, 2).unwrap();
    assert_eq!(g.data(up), &[7.0; 4]);

    let row = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let wide = g.bilinear_resize(row, 1, 4).unwrap();
    assert_eq!(g.data(wide), &[1.0, 1.5, 2.5, 3.0]);

    let mut rng = seeded(4);
    let x = uniform(&mut rng, &[1, 2, 3, 5], -1.0, 1.0);
    let xv = g.constant(x.clone());
    let same = g.bilinear_resize(xv, 3, 5).unwrap();
    assert_eq!(g.data(same), x.data());
}

#[test]
fn bilinear_gradient() {
    let mut rng = seeded(6);
    let x = uniform(&mut rng, &[1, 2, 3, 4], -1.0, 1.0);
    let probe = uniform(&mut rng, &[1, 2, 7, 5], -1.0, 1.0);
    let r = check_all(&[x], |g, v| {
        let y = g.bilinear_resize(v[0], 7, 5)?;
        let p = g.constant(probe.clone());
        let m = g.mul(y, p)?;
        g.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[1]));
    let shift = g.constant(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);

    let unit = g.constant(t(&[1, 1, 2, 2], &[-1.0, 1.0, -1.0, 1.0]));
    let y = g.batch_norm(unit, gamma, shift, &mut stats, NormMode::Train, 1e-5).unwrap();
    for (a, b) in g.data(y).iter().zip([-1.0, 1.0, -1.0, 1.0]) {
        assert!((a - b).abs() < 1e-5);
    }

    let constant = g.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
    let z = g.batch_norm(constant, gamma, shift, &mut stats, NormMode::Train, 1e-5).unwrap();
    assert!(g.data(z).iter().all(|v| *v == 0.0));

    let single = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
    assert!(matches!(
        g.batch_norm(single, gamma, shift, &mut stats, NormMode::Train, 1e-5),
        Err(Error::DegenerateBatch(_))
    ));
    // eval mode is fine with a single element
    assert!(g.batch_norm(single, gamma, shift, &mut stats, NormMode::Eval, 1e-5).is_ok());
}

#[test]
fn batch_norm_running_stats_update() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::ones(&[1]));
    let shift = g.constant(Tensor::zeros(&[1]));
    let mut stats = RunningStats::new(1);
    let x = g.constant(t(&[1, 1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
    g.batch_norm(x, gamma, shift, &mut stats, NormMode::Train, 1e-5).unwrap();
    assert!((stats.mean[0] - 0.25).abs() < 1e-15);
    // unbiased variance of 1..4 is 5/3
    assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn batch_norm_gradient() {
    let mut rng = seeded(9);
    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
    let shift = uniform(&mut rng, &[3], -0.5, 0.5);
    let probe = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    for mode in [NormMode::Train, NormMode::Eval] {
        let r = check_all(&[x.clone(), gamma.clone(), shift.clone()], |g, v| {
            let mut stats = RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, 1e-5)?;
            let p = g.constant(probe.clone());
            let m = g.mul(y, p)?;
            g.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{mode:?}: {r:?}");
    }
}

#[test]
fn activation_examples() {
    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[-2.0, 0.0]));
    let r = g.relu(x);
    assert_eq!(g.data(r)[0], 0.0);
    let s = g.sigmoid(x);
    assert_eq!(g.data(s)[1], 0.5);
    let total = g.sum(s).unwrap();
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap()[1], 0.25);
}

#[test]
fn sigmoid_gradient() {
    let mut rng = seeded(10);
    let x = uniform(&mut rng, &[4, 4], -4.0, 4.0);
    let probe = uniform(&mut rng, &[4, 4], -1.0, 1.0);
    let r = check_all(&[x], |g, v| {
        let y = g.sigmoid(v[0]);
        let p = g.constant(probe.clone());
        let m = g.mul(y, p)?;
        g.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn reduction_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let m = g.mean(x).unwrap();
    assert_eq!(g.data(m), &[2.0]);
    let c = g.constant(Tensor::full(&[2, 2], 0.4));
    let s = g.reduce(c, Reduce::Std).unwrap();
    assert!((g.data(s)[0] - 1e-6).abs() < 1e-12);
}

#[test]
fn empty_reduction_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[0]));
    assert!(matches!(g.reduce(x, Reduce::Mean), Err(Error::EmptyRegion(_))));
    let y = g.constant(Tensor::zeros(&[4, 4]));
    assert!(matches!(g.window_reduce(y, 0, 1, Reduce::Mean), Err(Error::EmptyRegion(_))));
    assert!(matches!(g.window_reduce(y, 5, 1, Reduce::Mean), Err(Error::Config(_))));
}

#[test]
fn std_gradient_on_a_window() {
    let mut rng = seeded(12);
    let x = uniform(&mut rng, &[8], -1.0, 1.0);
    let r = check_all(&[x], |g, v| g.reduce(v[0], Reduce::Std)).unwrap();
    assert!(r.max_rel_err() < 1e-4, "{r:?}");
}

#[test]
fn window_reduce_layout() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    let m = g.window_reduce(x, 2, 2, Reduce::Mean).unwrap();
    assert_eq!(g.shape(m), &[1, 4]);
    assert_eq!(g.data(m), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn window_reduce_gradient() {
    let mut rng = seeded(13);
    let x = uniform(&mut rng, &[2, 1, 6, 6], -1.0, 1.0);
    let probe = uniform(&mut rng, &[2, 4], -1.0, 1.0);
    for kind in [Reduce::Sum, Reduce::Mean, Reduce::Std] {
        let r = check_all(&[x.clone()], |g, v| {
            let w = g.window_reduce(v[0], 3, 3, kind)?;
            let p = g.constant(probe.clone());
            let m = g.mul(w, p)?;
            g.sum(m)
        })
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{kind:?}: {r:?}");
    }
}

#[test]
fn shape_ops_round_trip() {
    let mut rng = seeded(14);
    let x = uniform(&mut rng, &[1, 2, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let flat = g.reshape(xv, &[1, 4]).unwrap();
    let back = g.reshape(flat, &[1, 2, 2]).unwrap();
    assert_eq!(g.value(back).data(), x.data());
    assert!(g.reshape(xv, &[3]).is_err());

    let tt = g.transpose(xv).unwrap();
    let tt2 = g.transpose(tt).unwrap();
    assert_eq!(g.data(tt2), x.data());

    let a = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let b = g.constant(Tensor::ones(&[1, 3, 3, 3]));
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[1, 5, 3, 3]);
    let bad = g.constant(Tensor::ones(&[1, 3, 2, 3]));
    assert!(g.concat_channels(&[a, bad]).is_err());
}

#[test]
fn concat_and_transpose_gradients() {
    let mut rng = seeded(15);
    let a = uniform(&mut rng, &[2, 2, 2, 3], -1.0, 1.0);
    let b = uniform(&mut rng, &[2, 1, 2, 3], -1.0, 1.0);
    let probe = uniform(&mut rng, &[2, 6, 3], -1.0, 1.0);
    let r = check_all(&[a, b], |g, v| {
        let c = g.concat_channels(&[v[0], v[1]])?;
        let r = g.reshape(c, &[2, 3, 6])?;
        let t = g.transpose(r)?;
        let p = g.constant(probe.clone());
        let m = g.mul(t, p)?;
        g.sum(m)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-8, "{r:?}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.variable(t(&[3], &[1.0, -2.0, 5.0]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 3]);

    let mut g = Graph::new();
    let x = g.variable(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    // repeated calls accumulate
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    g.zero_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn conv_bn_relu_mean_pipeline_gradient() {
    let mut rng = seeded(16);
    let x = uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.1, 0.1);
    let gamma = uniform(&mut rng, &[3], 0.5, 1.5);
    let shift = uniform(&mut rng, &[3], 0.2, 0.6);
    let r = check_all(&[x, w, b, gamma, shift], |g, v| {
        let mut stats = RunningStats::new(3);
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let y = g.batch_norm(y, v[3], v[4], &mut stats, NormMode::Train, 1e-5)?;
        let y = g.relu(y);
        let sq = g.square(y);
        g.mean(sq)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-4, "{r:?}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = seeded(17);
    let a = uniform(&mut rng, &[6], 0.5, 2.0);
    let b = uniform(&mut rng, &[6], 0.5, 2.0);
    let s = uniform(&mut rng, &[1], -1.0, 1.0);
    let r = check_all(&[a, b, s], |g, v| {
        let q = g.div(v[0], v[1])?;
        let d = g.sub(q, v[1])?;
        let l = g.ln(v[0]);
        let e = g.add(d, l)?;
        let r = g.sqrt(v[1]);
        let e = g.mul(e, r)?;
        let e = g.scale_by(e, v[2])?;
        let e = g.one_minus(e);
        let e = g.mul_scalar(e, 0.7);
        g.sum(e)
    })
    .unwrap();
    assert!(r.max_rel_err() < 1e-6, "{r:?}");
}

#[test]
fn clamp_passes_gradient_only_inside() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(&[4], vec![-2.0, 0.5, 1.5, 3.0]).unwrap());
    let y = g.clamp(x, 0.0, 2.0);
    assert_eq!(g.data(y), &[0.0, 0.5, 1.5, 2.0]);
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn kink_margin_reports_nearest_breakpoint() {
    let mut g = Graph::new();
    assert_eq!(g.kink_margin(), f64::INFINITY);
    let x = g.variable(Tensor::new(&[3], vec![-0.5, 0.02, 1.0]).unwrap());
    g.relu(x);
    assert_eq!(g.kink_margin(), 0.02);
    let y = g.constant(Tensor::new(&[1], vec![0.995]).unwrap());
    g.clamp(y, 0.0, 1.0);
    assert!((g.kink_margin() - 0.005).abs() < 1e-12);
}

#[test]
fn ops_are_deterministic() {
    let run = || {
        let mut rng = seeded(99);
        let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.variable(x), g.variable(w));
        let y = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let y = g.bilinear_resize(y, 8, 8).unwrap();
        let y = g.sigmoid(y);
        let s = g.mean(y).unwrap();
        g.backward(s).unwrap();
        (g.data(y).to_vec(), g.grad(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
