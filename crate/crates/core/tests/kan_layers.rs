use medkan_core::gradcheck::{check, probe_loss, CheckOptions};
use medkan_core::kan::{
    basis_expand, BSplineGrid, Basis, GridConfig, KanConv2d, KanLinear, KanOptions, RbfGrid,
};
use medkan_core::tensor::{Graph, ParamStore, ShapeRecorder, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL: KanOptions = KanOptions { base: true, bias: true };

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rbf(k: usize) -> Basis {
    Basis::Rbf(RbfGrid::uniform(k, -2.0, 2.0, None).unwrap())
}

fn bspline(k: usize) -> Basis {
    Basis::BSpline(BSplineGrid::new(k, 3, -2.0, 2.0).unwrap())
}

/// Textbook Cox–de Boor on half-open spans, written independently of the
/// library's in-place table.
fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let left = (x - knots[i]) / (knots[i + p] - knots[i]) * cox_de_boor(knots, i, p - 1, x);
    let right = (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1])
        * cox_de_boor(knots, i + 1, p - 1, x);
    left + right
}

fn linear_oracle(
    x: &Tensor<f64>,
    basis: &Basis,
    ws: &Tensor<f64>,
    wb: &Tensor<f64>,
    b: &Tensor<f64>,
) -> Vec<f64> {
    let (n, inp) = (x.shape()[0], x.shape()[1]);
    let (out, k) = (ws.shape()[0], ws.shape()[2]);
    let centers = match basis {
        Basis::Rbf(g) => g.centers().to_vec(),
        _ => unreachable!(),
    };
    let sigma = match basis {
        Basis::Rbf(g) => g.sigma(),
        _ => unreachable!(),
    };
    let mut y = vec![0.0; n * out];
    for s in 0..n {
        for j in 0..out {
            let mut acc = b.data()[j];
            for i in 0..inp {
                let xi = x.data()[s * inp + i];
                acc += wb.data()[j * inp + i] * xi / (1.0 + (-xi).exp());
                for kk in 0..k {
                    let d = xi - centers[kk];
                    let phi = (-(d * d) / (2.0 * sigma * sigma)).exp();
                    acc += ws.data()[(j * inp + i) * k + kk] * phi;
                }
            }
            y[s * out + j] = acc;
        }
    }
    y
}

fn run_linear(store: &ParamStore<f64>, layer: &KanLinear, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

fn run_conv(store: &ParamStore<f64>, layer: &KanConv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let y = layer.forward(&mut g, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn rbf_matches_direct_formula() {
    let g = RbfGrid::uniform(5, -2.0, 2.0, Some(1.0)).unwrap();
    assert_eq!(g.centers(), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
    let mut out = [0.0f64; 5];
    g.eval(0.0, &mut out);
    let expected = [(-2.0f64).exp(), (-0.5f64).exp(), 1.0, (-0.5f64).exp(), (-2.0f64).exp()];
    for (a, b) in out.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn rbf_sigma_must_be_positive() {
    assert!(RbfGrid::uniform(4, -1.0, 1.0, Some(0.0)).is_err());
    assert!(GridConfig { sigma: Some(-0.5), ..GridConfig::default() }.build().is_err());
}

#[test]
fn bspline_partition_of_unity_and_nonnegative() {
    let mut r = rng(3);
    for (k, p) in [(8, 3), (5, 1), (6, 2), (12, 3), (4, 0)] {
        let g = BSplineGrid::new(k, p, -2.0, 2.0).unwrap();
        let mut out = vec![0.0f64; k];
        for i in 0..200 {
            let x = if i == 0 { -2.0 } else if i == 1 { 2.0 } else { r.gen_range(-2.0..=2.0) };
            g.eval(x, &mut out);
            let s: f64 = out.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "K={k} p={p} x={x} sum={s}");
            assert!(out.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn bspline_matches_textbook_recursion() {
    let (k, p, lo, hi) = (8usize, 3usize, -2.0, 2.0);
    let g = BSplineGrid::new(k, p, lo, hi).unwrap();
    let h = (hi - lo) / (k - p) as f64;
    let knots: Vec<f64> = (0..=(k - p) + 2 * p).map(|i| lo + (i as f64 - p as f64) * h).collect();
    let mut r = rng(11);
    let mut out = vec![0.0f64; k];
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = r.gen_range(lo..hi);
        g.eval(x, &mut out);
        for (i, &v) in out.iter().enumerate() {
            worst = worst.max((v - cox_de_boor(&knots, i, p, x)).abs());
        }
    }
    assert!(worst < 1e-12, "max diff {worst}");
}

#[test]
fn bspline_clamps_outside_domain() {
    let g = BSplineGrid::new(8, 3, -2.0, 2.0).unwrap();
    let (mut a, mut b) = ([0.0f64; 8], [0.0f64; 8]);
    g.eval(5.0, &mut a);
    g.eval(2.0, &mut b);
    assert_eq!(a, b);
    let mut d = [1.0f64; 8];
    g.eval_with_deriv(-7.0, &mut a, &mut d);
    assert!(d.iter().all(|&v| v == 0.0));
}

#[test]
fn kan_linear_zero_weights_give_zero() {
    let mut store = ParamStore::<f64>::new(0);
    let layer = KanLinear::new(&mut store, "l", 3, 4, rbf(6), FULL);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng(1));
    let y = run_linear(&store, &layer, &x);
    assert_eq!(y.shape(), &[5, 4]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn kan_linear_single_edge_analytic() {
    let basis = Basis::Rbf(RbfGrid::new(vec![0.0], 1.0).unwrap());
    let mut store = ParamStore::<f64>::new(0);
    let layer = KanLinear::new(&mut store, "l", 1, 1, basis, FULL);
    store.get_mut(layer.spline_weight()).data_mut()[0] = 2.0;
    store.get_mut(layer.base_weight().unwrap()).data_mut()[0] = 0.0;
    let y = run_linear(&store, &layer, &Tensor::new(&[1, 1], vec![0.0]).unwrap());
    assert_eq!(y.data(), &[2.0]);
}

#[test]
fn kan_linear_matches_loop_oracle() {
    for seed in 0..5 {
        let basis = rbf(4 + seed as usize);
        let mut store = ParamStore::<f64>::new(seed);
        let layer = KanLinear::new(&mut store, "l", 5, 3, basis.clone(), FULL);
        for t in store.tensors_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng(seed + 100 + t.numel() as u64));
        }
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng(seed));
        let y = run_linear(&store, &layer, &x);
        let expected = linear_oracle(
            &x,
            &basis,
            store.get(layer.spline_weight()),
            store.get(layer.base_weight().unwrap()),
            store.get(layer.bias().unwrap()),
        );
        let worst = y
            .data()
            .iter()
            .zip(&expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "seed {seed}: {worst}");
    }
}

#[test]
fn kan_linear_rejects_wrong_width() {
    let mut store = ParamStore::<f64>::new(0);
    let layer = KanLinear::new(&mut store, "l", 3, 2, rbf(4), FULL);
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(layer.forward(&mut g, x).is_err());
}

#[test]
fn kan_conv_zero_weights_give_zero() {
    let mut store = ParamStore::<f64>::new(0);
    let layer =
        KanConv2d::new(&mut store, "c", 4, 4, 3, 1, 1, 2, rbf(5), FULL).unwrap();
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng(2));
    let y = run_conv(&store, &layer, &x);
    assert_eq!(y.shape(), &[2, 4, 5, 5]);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn kan_conv_1x1_is_per_pixel_kan_linear() {
    let basis = bspline(6);
    let mut cstore = ParamStore::<f64>::new(1);
    let conv = KanConv2d::new(&mut cstore, "c", 3, 5, 1, 1, 0, 1, basis.clone(), FULL).unwrap();
    for t in cstore.tensors_mut() {
        *t = Tensor::randn(t.shape(), 0.5, &mut rng(t.numel() as u64));
    }
    let mut lstore = ParamStore::<f64>::new(1);
    let lin = KanLinear::new(&mut lstore, "l", 3, 5, basis, FULL);
    *lstore.get_mut(lin.spline_weight()) = cstore.get(conv.spline_weight()).clone();
    *lstore.get_mut(lin.base_weight().unwrap()) = cstore.get(conv.base_weight().unwrap()).clone();
    *lstore.get_mut(lin.bias().unwrap()) = cstore.get(conv.bias().unwrap()).clone();

    let (n, c, h, w) = (2, 3, 4, 3);
    let x = Tensor::randn(&[n, c, h, w], 1.0, &mut rng(9));
    let y = run_conv(&cstore, &conv, &x);
    let pixels = Tensor::from_fn(&[n * h * w, c], |i| {
        let (pix, ch) = (i / c, i % c);
        let (s, hw) = (pix / (h * w), pix % (h * w));
        x.data()[(s * c + ch) * h * w + hw]
    });
    let yl = run_linear(&lstore, &lin, &pixels);
    for s in 0..n {
        for o in 0..5 {
            for hw in 0..h * w {
                let a = y.data()[(s * 5 + o) * h * w + hw];
                let b = yl.data()[(s * h * w + hw) * 5 + o];
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn grouped_kan_conv_is_blocked() {
    for (groups, stride, pad) in [(2, 1, 1), (4, 2, 0), (2, 2, 1)] {
        let (c, o, k) = (8, 12, 3);
        let basis = rbf(4);
        let mut store = ParamStore::<f64>::new(groups as u64);
        let conv = KanConv2d::new(&mut store, "c", c, o, k, stride, pad, groups, basis.clone(), FULL)
            .unwrap();
        for t in store.tensors_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng(7 + t.numel() as u64));
        }
        let x = Tensor::randn(&[2, c, 6, 5], 1.0, &mut rng(4));
        let y = run_conv(&store, &conv, &x);

        let (cg, og) = (c / groups, o / groups);
        let mut parts = Vec::new();
        for gi in 0..groups {
            let mut sub = ParamStore::<f64>::new(0);
            let part = KanConv2d::new(&mut sub, "p", cg, og, k, stride, pad, 1, basis.clone(), FULL)
                .unwrap();
            let slice_rows = |t: &Tensor<f64>| {
                let row = t.numel() / o;
                let mut shape = t.shape().to_vec();
                shape[0] = og;
                Tensor::new(&shape, t.data()[gi * og * row..(gi + 1) * og * row].to_vec()).unwrap()
            };
            *sub.get_mut(part.spline_weight()) = slice_rows(store.get(conv.spline_weight()));
            *sub.get_mut(part.base_weight().unwrap()) = slice_rows(store.get(conv.base_weight().unwrap()));
            *sub.get_mut(part.bias().unwrap()) = slice_rows(store.get(conv.bias().unwrap()));
            let mut g = Graph::inference(&sub);
            let xv = g.constant(x.clone());
            let xs = g.slice(xv, 1, gi * cg, cg).unwrap();
            let ys = part.forward(&mut g, xs).unwrap();
            parts.push(g.value(ys).clone());
        }
        let mut g = Graph::inference(&store);
        let vs: Vec<_> = parts.into_iter().map(|t| g.constant(t)).collect();
        let cat = g.concat(&vs, 1).unwrap();
        let diff = g.value(cat).max_abs_diff(&y);
        assert!(diff <= 1e-12, "groups {groups}: {diff}");
    }
}

#[test]
fn kan_conv_rejects_bad_groups() {
    let mut store = ParamStore::<f64>::new(0);
    assert!(KanConv2d::new(&mut store, "c", 6, 8, 3, 1, 1, 4, rbf(4), FULL).is_err());
    let conv = KanConv2d::new(&mut store, "d", 4, 4, 5, 1, 0, 1, rbf(4), FULL).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(&[1, 4, 3, 3]));
    assert!(conv.forward(&mut g, x).is_err());
}

#[test]
fn closed_form_param_counts() {
    let no_bias = KanOptions { base: true, bias: false };
    assert_eq!(KanLinear::param_count(2, 3, 4, FULL), 33);
    assert_eq!(KanConv2d::param_count(4, 8, 3, 1, 4, no_bias), 1440);

    let mut rec = ShapeRecorder::default();
    KanLinear::new(&mut rec, "a", 2, 3, rbf(4), FULL);
    assert_eq!(rec.total(), 33);
    let mut rec = ShapeRecorder::default();
    KanConv2d::new(&mut rec, "b", 4, 8, 3, 1, 1, 1, rbf(4), no_bias).unwrap();
    assert_eq!(rec.total(), 1440);
}

#[test]
fn composed_param_count_matches_enumeration() {
    let mut rec = ShapeRecorder::default();
    let mut expected = 0;
    for (i, (c, o, k, g)) in [(8, 16, 3, 4), (16, 16, 1, 1), (16, 32, 3, 8)].into_iter().enumerate() {
        let opts = KanOptions { base: i % 2 == 0, bias: i != 1 };
        KanConv2d::new(&mut rec, &format!("c{i}"), c, o, k, 1, 1, g, rbf(6), opts).unwrap();
        expected += KanConv2d::param_count(c, o, k, g, 6, opts);
    }
    KanLinear::new(&mut rec, "head", 32, 10, bspline(7), FULL);
    expected += KanLinear::param_count(32, 10, 7, FULL);
    let enumerated: usize = rec.entries.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(enumerated, expected);
}

fn assert_grad_ok(label: &str, out: medkan_core::gradcheck::CheckOutcome) {
    assert!(out.worst_rel < 1e-6, "{label}: rel {} at {}", out.worst_rel, out.worst_at);
}

#[test]
fn kan_linear_gradients() {
    for seed in 0..10u64 {
        for basis in [rbf(3 + seed as usize % 4), bspline(5 + seed as usize % 3)] {
            let mut store = ParamStore::<f64>::new(seed);
            let opts = KanOptions { base: seed % 3 != 0, bias: true };
            let layer = KanLinear::new(&mut store, "l", 3, 2, basis.clone(), opts);
            for t in store.tensors_mut() {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng(seed * 31 + t.numel() as u64));
            }
            let mut inputs = vec![Tensor::uniform(&[3, 3], -1.8, 1.8, &mut rng(seed))];
            let out = check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
                let y = layer.forward(g, v[0])?;
                probe_loss(g, y, seed)
            })
            .unwrap();
            assert_grad_ok(&format!("kan_linear {:?} seed {seed}", basis.kind()), out);
        }
    }
}

#[test]
fn kan_conv_gradients() {
    for seed in 0..10u64 {
        for basis in [rbf(3 + seed as usize % 3), bspline(5 + seed as usize % 2)] {
            let groups = 1 + seed as usize % 2;
            let stride = 1 + seed as usize % 3 / 2;
            let opts = KanOptions { base: seed % 4 != 1, bias: seed % 2 == 0 };
            let mut store = ParamStore::<f64>::new(seed);
            let layer =
                KanConv2d::new(&mut store, "c", 2, 4, 3, stride, 1, groups, basis.clone(), opts).unwrap();
            for t in store.tensors_mut() {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng(seed * 17 + t.numel() as u64));
            }
            let mut inputs = vec![Tensor::uniform(&[2, 2, 4, 4], -1.8, 1.8, &mut rng(seed))];
            let out = check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
                let y = layer.forward(g, v[0])?;
                probe_loss(g, y, seed)
            })
            .unwrap();
            assert_grad_ok(&format!("kan_conv {:?} seed {seed}", basis.kind()), out);
        }
    }
}

#[test]
fn rbf_outputs_bounded() {
    let g = RbfGrid::uniform(8, -2.0, 2.0, None).unwrap();
    let mut out = [0.0f64; 8];
    let mut r = rng(5);
    for _ in 0..1000 {
        let x = r.gen_range(-3.0..3.0);
        g.eval(x, &mut out);
        for (&v, &c) in out.iter().zip(g.centers()) {
            assert!(v > 0.0 && v <= 1.0);
            assert_eq!(v == 1.0, x == c);
        }
    }
}

proptest! {
    #[test]
    fn batch_rbf_equals_elementwise(xs in proptest::collection::vec(-4.0f64..4.0, 1..64), k in 2usize..12) {
        let basis = rbf(k);
        let t = Tensor::new(&[xs.len()], xs.clone()).unwrap();
        let batch = basis_expand(&basis, &t);
        let mut one = vec![0.0f64; k];
        for (i, &x) in xs.iter().enumerate() {
            basis.eval(x, &mut one);
            prop_assert_eq!(&batch.data()[i * k..(i + 1) * k], one.as_slice());
        }
    }

    #[test]
    fn bspline_unity_anywhere(x in -2.0f64..=2.0, k in 4usize..20) {
        let g = BSplineGrid::new(k, 3, -2.0, 2.0).unwrap();
        let mut out = vec![0.0f64; k];
        g.eval(x, &mut out);
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
