use medkan_core::gradcheck::{check, probe_loss, CheckOptions};
use medkan_core::tensor::{Conv2dGeom, Graph, ParamStore, Tensor, Var};
use medkan_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    t(&[m, n], &c)
}

/// Direct six-loop grouped cross-correlation.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cg * groups, c);
    let og = o / groups;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            let grp = oc / og;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..cg {
                        let ch = grp * cg + ic;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((s * c + ch) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * cg + ic) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((s * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    t(&[n, o, oh, ow], &out)
}

fn forward1(f: impl FnOnce(&mut Graph<'_, f64>, Var) -> Var, x: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = f(&mut g, v);
    g.value(y).clone()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let b = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
    let bv = g.constant(b.clone());
    let y = g.matmul(eye, bv).unwrap();
    assert_eq!(g.value(y), &b);

    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let c = g.constant(t(&[2, 1], &[0., 1.]));
    let y = g.matmul(a, c).unwrap();
    assert_eq!(g.value(y).data(), &[2., 4.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let y = g.matmul(av, bv).unwrap();
    assert!(g.value(y).max_abs_diff(&matmul_oracle(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn conv_1x1_is_per_pixel_matmul() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(&[2, 3, 4, 5], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[6, 3, 1, 1], 1.0, &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, None, Conv2dGeom::square(1, 1, 0), 1).unwrap();
    let y = g.value(y).clone();
    // oracle: W[6×3] · X_s[3×20] for every sample
    let wm = t(&[6, 3], w.data());
    for s in 0..2 {
        let xs = t(&[3, 20], &x.data()[s * 60..(s + 1) * 60]);
        let want = matmul_oracle(&wm, &xs);
        let got = t(&[6, 20], &y.data()[s * 120..(s + 1) * 120]);
        assert!(got.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_zero_weights_give_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::ones(&[1, 2, 3, 3]));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.conv2d(x, w, Some(b), Conv2dGeom::square(3, 1, 1), 1).unwrap();
    let y = g.value(y);
    for (i, v) in y.data().iter().enumerate() {
        assert_eq!(*v, [0.5, -1.0, 2.0][i / 9]);
    }
}

#[test]
fn grouped_conv_matches_direct_loops() {
    let mut r = rng(3);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let x = Tensor::<f64>::randn(&[2, 4, 6, 5], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[6, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::<f64>::randn(&[6], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g
            .conv2d(xv, wv, Some(bv), Conv2dGeom::square(3, stride, pad), 2)
            .unwrap();
        let want = conv_oracle(&x, &w, Some(&b), stride, pad, 2);
        assert!(g.value(y).max_abs_diff(&want) < 1e-10);
    }
}

#[test]
fn conv_rejects_bad_groups_and_geometry() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[4, 1, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, Conv2dGeom::square(3, 1, 1), 2),
        Err(Error::Config(_))
    ));
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let w = g.constant(Tensor::zeros(&[2, 2, 5, 5]));
    assert!(matches!(
        g.conv2d(x, w, None, Conv2dGeom::square(5, 1, 0), 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros(&[2, 3, 2]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[1., -2., 3.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[2., -4., 6.]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::<f64>::zeros(&[2]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
}

#[test]
fn shared_subexpression_accumulates() {
    // y = x·x + 3x ; dy/dx = 2x + 3
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.5, -0.5]));
    let a = g.mul(x, x).unwrap();
    let b = g.scale(x, 3.0);
    let y = g.add(a, b).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap().data(), &[6.0, 2.0]);
}

#[test]
fn softmax_examples() {
    let y = forward1(|g, v| g.softmax(v, 1).unwrap(), Tensor::zeros(&[2, 4]));
    assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let y = forward1(|g, v| g.softmax(v, 1).unwrap(), t(&[1, 2], &[0.0, 3f64.ln()]));
    assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);

    let base = t(&[1, 3], &[0.3, -1.2, 2.0]);
    let shifted = base.map(|v| v + 1000.0);
    let a = forward1(|g, v| g.softmax(v, 1).unwrap(), base);
    let b = forward1(|g, v| g.softmax(v, 1).unwrap(), shifted);
    // 0.3+1000-1002 and 0.3-2 differ in rounding only at the ulp level
    assert!(a.max_abs_diff(&b) < 1e-13);
    assert!(b.data().iter().all(|&v| v > 0.0));
}

#[test]
fn softmax_shift_by_exact_offset_is_exact() {
    // With dyadic logits the +1000 offset is absorbed without rounding, so
    // the max-subtracted logits and the result are bit-identical.
    let base = t(&[1, 3], &[0.5, -1.25, 2.0]);
    let shifted = base.map(|v| v + 1000.0);
    let a = forward1(|g, v| g.softmax(v, 1).unwrap(), base);
    let b = forward1(|g, v| g.softmax(v, 1).unwrap(), shifted);
    assert_eq!(a, b);
}

/// Every primitive, on 20 random small instances, against central
/// differences.
#[test]
fn finite_difference_checks_for_every_primitive() {
    type Build = fn(&mut Graph<'_, f64>, &[Var]) -> medkan_core::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 2], vec![3, 2]], |g, v| g.mul(v[0], v[1])),
        ("neg", vec![vec![4]], |g, v| Ok(g.neg(v[0]))),
        ("exp", vec![vec![2, 2]], |g, v| Ok(g.exp(v[0]))),
        ("silu", vec![vec![5]], |g, v| Ok(g.silu(v[0]))),
        ("gelu", vec![vec![5]], |g, v| Ok(g.gelu(v[0]))),
        ("relu", vec![vec![6]], |g, v| Ok(g.relu(v[0]))),
        ("scale", vec![vec![3]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("mean", vec![vec![2, 3]], |g, v| Ok(g.mean(v[0]))),
        ("mean_trailing", vec![vec![2, 3, 2, 2]], |g, v| g.mean_trailing(v[0], 2)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("concat", vec![vec![2, 1, 3], vec![2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![2, 5, 2]], |g, v| g.slice(v[0], 1, 1, 3)),
        ("add_bias", vec![vec![2, 3, 2, 2], vec![3]], |g, v| g.add_bias(v[0], v[1])),
        ("layer_norm", vec![vec![2, 4, 3], vec![4], vec![4]], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_bt", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_bt(v[0], v[1])),
        ("conv2d", vec![vec![2, 4, 5, 5], vec![6, 2, 3, 3], vec![6]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dGeom::square(3, 2, 1), 2)
        }),
        ("depthwise", vec![vec![1, 3, 4, 4], vec![3, 1, 3, 3]], |g, v| {
            g.conv2d(v[0], v[1], None, Conv2dGeom::square(3, 1, 1), 3)
        }),
    ];
    let mut r = rng(7);
    for (name, shapes, build) in cases {
        for instance in 0..20u64 {
            let mut inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    // keep relu inputs away from the kink at 0
                    Tensor::from_fn(s, |_| {
                        let v: f64 = r.gen_range(-1.5..1.5);
                        if name == "relu" && v.abs() < 0.05 { 0.3 } else { v }
                    })
                })
                .collect();
            let mut store = ParamStore::<f64>::new(0);
            let out = check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
                let y = build(g, v)?;
                if g.shape(y).is_empty() {
                    Ok(y)
                } else {
                    probe_loss(g, y, instance)
                }
            })
            .unwrap();
            assert!(
                out.worst_rel < 1e-6,
                "{name} instance {instance}: rel err {} at {}",
                out.worst_rel,
                out.worst_at
            );
        }
    }
}

#[test]
fn forward_ops_are_pure() {
    let mut r = rng(9);
    let x = Tensor::<f64>::randn(&[2, 4, 5, 5], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 2, 3, 3], 1.0, &mut r);
    let run = || {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, Conv2dGeom::square(3, 1, 1), 2).unwrap();
        let y = g.silu(y);
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn reshape_transpose_round_trip(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let tr = g.transpose(v).unwrap();
        let back = g.transpose(tr).unwrap();
        let flat = g.reshape(back, &[rows * cols]).unwrap();
        let again = g.reshape(flat, &[rows, cols]).unwrap();
        prop_assert_eq!(g.value(again), &x);
    }

    #[test]
    fn concat_then_slice_recovers_parts(a in 1usize..4, b in 1usize..4, outer in 1usize..3, seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[outer, a, 2], 1.0, &mut r);
        let y = Tensor::<f64>::randn(&[outer, b, 2], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
        let c = g.concat(&[xv, yv], 1).unwrap();
        let xs = g.slice(c, 1, 0, a).unwrap();
        let ys = g.slice(c, 1, a, b).unwrap();
        prop_assert_eq!(g.value(xs), &x);
        prop_assert_eq!(g.value(ys), &y);
    }
}
