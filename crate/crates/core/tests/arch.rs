use medkan_core::arch::checkpoint::{peek, MAGIC};
use medkan_core::arch::*;
use medkan_core::gradcheck::{check, probe_loss, CheckOptions};
use medkan_core::kan::{Basis, GridConfig, KanConv2d, KanOptions, RbfGrid};
use medkan_core::tensor::{Conv2dGeom, Graph, ParamStore, ShapeRecorder, Tensor};
use medkan_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const KAN: KanOptions = KanOptions { base: true, bias: true };

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rbf(k: usize) -> Basis {
    Basis::Rbf(RbfGrid::uniform(k, -2.0, 2.0, None).unwrap())
}

fn zero_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) -> usize {
    let ids: Vec<_> = store.ids().filter(|&id| pred(store.name(id))).collect();
    for &id in &ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    ids.len()
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng(seed * 1000 + i as u64));
    }
}

fn toy_config() -> MedKanConfig {
    MedKanConfig {
        input_size: 8,
        in_channels: 2,
        num_classes: 3,
        stem_strides: [2, 1],
        stages: vec![StageSpec { dim: 8, num_lik: 1, num_gik: 1, groups: 2, downsample: false }],
        sffn_ratio: 2,
        grid: GridConfig { num_basis: 4, ..GridConfig::default() },
        ..MedKanConfig::default()
    }
}

/// 28×28 single-channel network with two stages.
fn desk_config() -> MedKanConfig {
    MedKanConfig {
        input_size: 28,
        in_channels: 1,
        num_classes: 4,
        stem_strides: [2, 1],
        stages: vec![
            StageSpec { dim: 16, num_lik: 1, num_gik: 0, groups: 4, downsample: false },
            StageSpec { dim: 32, num_lik: 1, num_gik: 1, groups: 4, downsample: true },
        ],
        ..MedKanConfig::default()
    }
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Graph<'_, f64>, medkan_core::tensor::Var) -> medkan_core::Result<medkan_core::tensor::Var>,
{
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let y = f(&mut g, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn stem_geometry() {
    let mut store = ParamStore::<f64>::new(0);
    let stem = Stem::new(&mut store, "stem", 3, 8, 16, [2, 2]);
    let x = Tensor::randn(&[1, 3, 224, 224], 1.0, &mut rng(0));
    let y = run(&store, &x, |g, v| stem.forward(g, v));
    assert_eq!(y.shape(), &[1, 16, 56, 56]);

    let mut store = ParamStore::<f64>::new(0);
    let stem = Stem::new(&mut store, "stem", 1, 8, 16, [2, 1]);
    let x = Tensor::randn(&[2, 1, 28, 28], 1.0, &mut rng(0));
    let y = run(&store, &x, |g, v| stem.forward(g, v));
    assert_eq!(y.shape(), &[2, 16, 14, 14]);

    let geo = desk_config().validate().unwrap();
    assert_eq!(geo.stem, [14, 14]);
    assert_eq!(geo.stages, vec![14, 7]);
    let bad = MedKanConfig { input_size: 27, ..desk_config() };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn stem_zero_weights_give_zero_features() {
    let mut store = ParamStore::<f64>::new(0);
    let stem = Stem::new(&mut store, "stem", 1, 4, 8, [2, 2]);
    zero_where(&mut store, |n| n.contains("conv"));
    let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng(1));
    let y = run(&store, &x, |g, v| stem.forward(g, v));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embed_averaging_kernel_is_mean_pool() {
    let (c, h) = (3, 8);
    let mut store = ParamStore::<f64>::new(0);
    let pe = PatchEmbed::new(&mut store, "pe", c, c);
    let w = store.get_mut(pe.conv().weight());
    *w = Tensor::from_fn(&[c, c, 2, 2], |i| if i / 4 / c == (i / 4) % c { 0.25 } else { 0.0 });
    let x = Tensor::randn(&[2, c, h, h], 1.0, &mut rng(2));
    let y = run(&store, &x, |g, v| pe.conv().forward(g, v));
    assert_eq!(y.shape(), &[2, c, h / 2, h / 2]);
    for s in 0..2 {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..h / 2 {
                    let at = |a: usize, b: usize| x.data()[((s * c + ch) * h + a) * h + b];
                    let mean = (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1)) / 4.0;
                    let got = y.data()[((s * c + ch) * (h / 2) + i) * (h / 2) + j];
                    assert!((got - mean).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn patch_embed_changes_width_and_halves_side() {
    let mut store = ParamStore::<f64>::new(0);
    let pe = PatchEmbed::new(&mut store, "pe", 6, 10);
    let x = Tensor::randn(&[1, 6, 56, 56], 1.0, &mut rng(3));
    let y = run(&store, &x, |g, v| pe.forward(g, v));
    assert_eq!(y.shape(), &[1, 10, 28, 28]);
}

#[test]
fn lgck_zero_branch_is_identity() {
    for groups in [1, 2, 4] {
        let mut store = ParamStore::<f64>::new(groups as u64);
        let b = Lgck::new_kan(&mut store, "b", 8, groups, rbf(5), KAN).unwrap();
        randomize(&mut store, 3);
        assert_eq!(zero_where(&mut store, |n| n.contains("kconv")), 3);
        let x = Tensor::randn(&[2, 8, 5, 6], 1.0, &mut rng(4));
        let y = run(&store, &x, |g, v| b.forward(g, v));
        assert!(y.max_abs_diff(&x) <= 1e-12);
        assert_eq!(y, x);
    }
}

#[test]
fn lgck_equals_split_convkan_concat_oracle() {
    let (d, groups) = (8, 2);
    let basis = rbf(4);
    let mut store = ParamStore::<f64>::new(0);
    let b = Lgck::new_kan(&mut store, "b", d, groups, basis.clone(), KAN).unwrap();
    randomize(&mut store, 5);
    let x = Tensor::randn(&[2, d, 5, 5], 1.0, &mut rng(6));
    let y = run(&store, &x, |g, v| b.forward(g, v));

    let conv = b.kan_conv().unwrap();
    let norm_g = store.get(store.find("b.norm.gamma").unwrap()).clone();
    let norm_b = store.get(store.find("b.norm.beta").unwrap()).clone();
    let mut subs = Vec::new();
    let (dg, og) = (d / groups, d / groups);
    for gi in 0..groups {
        let mut sub = ParamStore::<f64>::new(0);
        let part = KanConv2d::new(&mut sub, "p", dg, og, 3, 1, 1, 1, basis.clone(), KAN).unwrap();
        for (src, dst) in [
            (conv.spline_weight(), part.spline_weight()),
            (conv.base_weight().unwrap(), part.base_weight().unwrap()),
            (conv.bias().unwrap(), part.bias().unwrap()),
        ] {
            let t = store.get(src);
            let row = t.numel() / d;
            let mut shape = t.shape().to_vec();
            shape[0] = og;
            *sub.get_mut(dst) = Tensor::new(&shape, t.data()[gi * og * row..(gi + 1) * og * row].to_vec()).unwrap();
        }
        subs.push((sub, part));
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let gm = g.constant(norm_g);
    let bt = g.constant(norm_b);
    let h = g.layer_norm(xv, gm, bt, 1e-5).unwrap();
    let h = g.value(h).clone();
    let mut outs = Vec::new();
    for (gi, (sub, part)) in subs.iter().enumerate() {
        let mut sg = Graph::inference(sub);
        let hv = sg.constant(h.clone());
        let hs = sg.slice(hv, 1, gi * dg, dg).unwrap();
        let o = part.forward(&mut sg, hs).unwrap();
        outs.push(g.constant(sg.value(o).clone()));
    }
    let cat = g.concat(&outs, 1).unwrap();
    let oracle = g.add(cat, xv).unwrap();
    assert!(g.value(oracle).max_abs_diff(&y) <= 1e-12);
}

#[test]
fn sffn_zero_branch_is_identity_and_counts() {
    let mut store = ParamStore::<f64>::new(0);
    let b = Sffn::new(&mut store, "s", 16, 4);
    let branch: usize = store
        .iter()
        .filter(|(n, _)| !n.contains("norm"))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(branch, 16 * 64 + 64 * 9 + 64 * 16 + (64 + 64 + 16));
    randomize(&mut store, 7);
    zero_where(&mut store, |n| n.contains("project"));
    let x = Tensor::randn(&[2, 16, 4, 4], 1.0, &mut rng(8));
    let y = run(&store, &x, |g, v| b.forward(g, v));
    assert_eq!(y, x);
}

#[test]
fn depthwise_conv_matches_per_channel_loops() {
    let (c, h, w) = (6, 5, 4);
    let mut store = ParamStore::<f64>::new(0);
    let dw = Conv2d::new(&mut store, "dw", c, c, 3, 1, 1, c, true);
    randomize(&mut store, 9);
    let x = Tensor::randn(&[2, c, h, w], 1.0, &mut rng(10));
    let y = run(&store, &x, |g, v| dw.forward(g, v));
    let wt = store.get(dw.weight());
    let bias = store.get(dw.bias().unwrap());
    let mut worst: f64 = 0.0;
    for s in 0..2 {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias.data()[ch];
                    for a in 0..3 {
                        for b in 0..3 {
                            let (ii, jj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += wt.data()[ch * 9 + a * 3 + b]
                                    * x.data()[((s * c + ch) * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                    worst = worst.max((acc - y.data()[((s * c + ch) * h + i) * w + j]).abs());
                }
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn gik_zero_mixer_with_residual_is_identity() {
    for mlp in [false, true] {
        let mut store = ParamStore::<f64>::new(0);
        let b = if mlp {
            Gik::new_mlp(&mut store, "g", 4, 9, true)
        } else {
            Gik::new_kan(&mut store, "g", 4, 9, 2, &rbf(6), KAN, true)
        };
        randomize(&mut store, 11);
        zero_where(&mut store, |n| n.contains(".kan1.") || n.contains(".fc2."));
        let x = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut rng(12));
        let y = run(&store, &x, |g, v| b.forward(g, v));
        assert_eq!(y, x);
    }
}

#[test]
fn gik_mixes_each_channel_row_with_the_same_kan() {
    let (n, d, side) = (2, 3, 2);
    let hw = side * side;
    let mut store = ParamStore::<f64>::new(0);
    let b = Gik::new_kan(&mut store, "g", d, hw, 1, &rbf(5), KAN, false);
    randomize(&mut store, 13);
    let x = Tensor::randn(&[n, d, side, side], 1.0, &mut rng(14));
    let y = run(&store, &x, |g, v| b.forward(g, v));
    assert_eq!(y.shape(), x.shape());

    let gamma = store.get(store.find("g.norm.gamma").unwrap()).data().to_vec();
    let beta = store.get(store.find("g.norm.beta").unwrap()).data().to_vec();
    let mut normed = vec![0.0; x.numel()];
    for s in 0..n {
        for p in 0..hw {
            let col: Vec<f64> = (0..d).map(|c| x.data()[(s * d + c) * hw + p]).collect();
            let mean = col.iter().sum::<f64>() / d as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            for c in 0..d {
                normed[(s * d + c) * hw + p] = (col[c] - mean) / (var + 1e-5).sqrt() * gamma[c] + beta[c];
            }
        }
    }
    let layer = &b.kan_layers()[0];
    for row in 0..n * d {
        let r = Tensor::new(&[1, hw], normed[row * hw..(row + 1) * hw].to_vec()).unwrap();
        let out = run(&store, &r, |g, v| layer.forward(g, v));
        for p in 0..hw {
            assert!((out.data()[p] - y.data()[row * hw + p]).abs() < 1e-12);
        }
    }
}

#[test]
fn gik_over_token_limit_is_config_error() {
    let mut cfg = desk_config();
    cfg.stages[0].num_gik = 1;
    cfg.token_limit = 100;
    let msg = MedKan::init::<f32>(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("token limit"), "{msg}");
}

#[test]
fn forward_shapes_and_zero_head() {
    let cfg = desk_config();
    let (model, mut store) = MedKan::init::<f64>(&cfg, 1).unwrap();
    let x = Tensor::randn(&[2, 1, 28, 28], 1.0, &mut rng(15));
    let logits = model.predict(&store, &x).unwrap();
    assert_eq!(logits.shape(), &[2, 4]);
    zero_where(&mut store, |n| n.starts_with("head.fc"));
    let logits = model.predict(&store, &x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let mut g = Graph::<f64>::new();
    let l = g.constant(logits);
    let p = g.softmax(l, 1).unwrap();
    assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let wrong = Tensor::zeros(&[2, 3, 28, 28]);
    assert!(matches!(model.predict(&store, &wrong), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn toy_model_full_gradient_check() {
    let cfg = toy_config();
    let (model, mut store) = MedKan::init::<f64>(&cfg, 7).unwrap();
    let mut inputs = vec![Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng(16))];
    let out = check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
        let y = model.forward(g, v[0])?;
        probe_loss(g, y, 3)
    })
    .unwrap();
    assert!(out.worst_rel < 1e-5, "rel {} at {}", out.worst_rel, out.worst_at);
    assert!(out.checked > 3000);
}

#[test]
fn variant_budgets_within_ten_percent() {
    for (v, target) in [(Variant::S, 11.5e6), (Variant::B, 24.6e6), (Variant::L, 48.0e6)] {
        let cfg = build_variant(v, 224, 11).unwrap();
        let closed = cfg.param_count().unwrap();
        let mut rec = ShapeRecorder::default();
        MedKan::new(&mut rec, &cfg).unwrap();
        assert_eq!(rec.total(), closed, "{v:?}");
        let ratio = closed as f64 / target;
        assert!((0.9..=1.1).contains(&ratio), "{v:?}: {closed} vs {target}");
    }
}

#[test]
fn closed_form_count_matches_enumeration_for_every_ablation() {
    for (local, global) in MedKanConfig::ABLATIONS {
        for base in [desk_config(), toy_config(), MedKanConfig::default()] {
            let cfg = MedKanConfig { local_block: local, global_mixer: global, kan_base: local != LocalBlockKind::PlainConv, ..base };
            let mut rec = ShapeRecorder::default();
            MedKan::new(&mut rec, &cfg).unwrap();
            assert_eq!(rec.total(), cfg.param_count().unwrap(), "{local:?}/{global:?}");
        }
    }
}

#[test]
fn every_ablation_row_constructs_and_runs() {
    let x = Tensor::<f32>::randn(&[2, 1, 28, 28], 1.0, &mut rng(17));
    for (local, global) in MedKanConfig::ABLATIONS {
        let cfg = MedKanConfig { local_block: local, global_mixer: global, ..desk_config() };
        let (model, store) = MedKan::init::<f32>(&cfg, 0).unwrap();
        let y = model.predict(&store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn fixed_seed_gives_identical_logits() {
    let cfg = desk_config();
    let x = Tensor::<f32>::randn(&[3, 1, 28, 28], 1.0, &mut rng(18));
    let (m1, s1) = MedKan::init::<f32>(&cfg, 42).unwrap();
    let (m2, s2) = MedKan::init::<f32>(&cfg, 42).unwrap();
    let a = m1.predict(&s1, &x).unwrap();
    let b = m2.predict(&s2, &x).unwrap();
    assert_eq!(a.data(), b.data());
    let (m3, s3) = MedKan::init::<f32>(&cfg, 43).unwrap();
    assert_ne!(m3.predict(&s3, &x).unwrap().data(), a.data());
}

fn sample_checkpoint() -> (Checkpoint<f32>, MedKan, ParamStore<f32>) {
    let cfg = desk_config();
    let (model, store) = MedKan::init::<f32>(&cfg, 5).unwrap();
    let m: Vec<_> = store.iter().map(|(_, t)| t.map(|v| v * 0.5)).collect();
    let v: Vec<_> = store.iter().map(|(_, t)| t.map(|v| v * v)).collect();
    let ts = TrainState {
        meta: TrainMeta { epoch: 3, step: 120, seed: 5, best_val_acc: Some(0.75), best_epoch: Some(2), epochs_since_best: 1 },
        m,
        v,
    };
    (Checkpoint::from_store(&cfg, &store, Some(ts)), model, store)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let (ckpt, model, store) = sample_checkpoint();
    let x = Tensor::<f32>::randn(&[2, 1, 28, 28], 1.0, &mut rng(19));
    let before = model.predict(&store, &x).unwrap();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let (model2, store2) = loaded.restore().unwrap();
    let after = model2.predict(&store2, &x).unwrap();
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let (cfg, dtype) = peek(&path).unwrap();
    assert_eq!(cfg, ckpt.config);
    assert_eq!(dtype.to_string(), "f32");
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let (ckpt, _, _) = sample_checkpoint();
    let bytes = ckpt.encode().unwrap();
    for cut in [0, 3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::<f32>::decode(&bytes[..cut]) {
            Err(Error::CorruptCheckpoint(msg)) => assert!(msg.contains("truncated"), "{msg}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::<f32>::decode(&bad), Err(Error::CorruptCheckpoint(_))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Checkpoint::<f32>::decode(&bad), Err(Error::CheckpointVersion(2))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::<f32>::decode(&extra), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(Checkpoint::<f64>::decode(&bytes), Err(Error::DtypeMismatch { .. })));
}

#[test]
fn checkpoint_with_wrong_tensor_set_fails_to_restore() {
    let (mut ckpt, _, _) = sample_checkpoint();
    ckpt.train_state = None;
    ckpt.params.pop();
    let bytes = ckpt.encode().unwrap();
    let loaded = Checkpoint::<f32>::decode(&bytes).unwrap();
    assert!(matches!(loaded.restore(), Err(Error::CorruptCheckpoint(_))));

    let (mut ckpt, _, _) = sample_checkpoint();
    ckpt.train_state = None;
    let last = ckpt.params.len() - 1;
    ckpt.params[last].1 = Tensor::zeros(&[1]);
    let loaded = Checkpoint::<f32>::decode(&ckpt.encode().unwrap()).unwrap();
    assert!(matches!(loaded.restore(), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn layout_matches_enumerated_offsets() {
    let (ckpt, _, _) = sample_checkpoint();
    let bytes = ckpt.encode().unwrap();
    let spans = ckpt.layout().unwrap();

    assert_eq!(&bytes[..4], MAGIC);
    let rd32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let rd64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize;
    assert_eq!(rd32(4), 1);
    let json_len = rd64(8);
    let mut pos = 16 + json_len;
    let count = rd32(pos);
    pos += 4;
    assert_eq!(count, spans.len());
    assert_eq!(count, 3 * ckpt.params.len());
    for span in &spans {
        assert_eq!(span.record, pos);
        let name_len = rd32(pos);
        let name = std::str::from_utf8(&bytes[pos + 4..pos + 4 + name_len]).unwrap();
        assert_eq!(name, span.name);
        pos += 4 + name_len;
        assert_eq!(bytes[pos], 0);
        let rank = bytes[pos + 1] as usize;
        pos += 2;
        let numel: usize = (0..rank).map(|i| rd64(pos + 8 * i)).product();
        pos += 8 * rank;
        assert_eq!(span.data, pos);
        assert_eq!(span.data_len, numel * 4);
        pos += numel * 4;
    }
    assert_eq!(pos, bytes.len());
    assert!(spans.iter().any(|s| s.name == "adam.v/head.fc.bias"));
}

#[test]
fn conv_geometry_is_floor_based() {
    let g = Conv2dGeom::square(3, 2, 1);
    assert_eq!(g.out_extent(224, 3).unwrap(), 112);
    assert_eq!(g.out_extent(7, 3).unwrap(), 4);
}
