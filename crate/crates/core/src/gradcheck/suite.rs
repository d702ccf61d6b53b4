use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check, probe_loss, CheckOptions, CheckOutcome};
use crate::arch::{Gik, LayerNorm, Lgck, Linear, MedKan, MedKanConfig, Sffn, StageSpec, Stem};
use crate::error::Result;
use crate::kan::{Basis, BSplineGrid, GridConfig, KanConv2d, KanLinear, KanOptions, RbfGrid};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Relative-error bound every registered check must meet.
pub const SUITE_TOLERANCE: f64 = 1e-5;

/// Layer kinds covered by [`registered_checks`], in report order.
pub const KINDS: [&str; 8] = ["KANLinear", "KANConv2d", "LGCK", "SFFN", "GIK", "stem", "head", "model"];

type Runner = Box<dyn Fn() -> Result<CheckOutcome> + Send + Sync>;

/// One named gradient check.
pub struct CheckCase {
    pub kind: String,
    pub name: String,
    runner: Runner,
}

impl CheckCase {
    pub fn new(
        kind: impl Into<String>,
        name: impl Into<String>,
        runner: impl Fn() -> Result<CheckOutcome> + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: kind.into(),
            name: name.into(),
            runner: Box::new(runner),
        }
    }

    pub fn run(&self) -> Result<CheckOutcome> {
        (self.runner)()
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Redraws every parameter from N(0, 0.3²) so that zero-initialized
/// tensors (biases, LayerNorm shifts) carry gradient signal.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        *t = Tensor::randn(t.shape(), 0.3, &mut rng(seed * 1000 + i as u64));
    }
}

fn rbf(k: usize) -> Basis {
    Basis::Rbf(RbfGrid::uniform(k, -2.0, 2.0, None).expect("valid grid"))
}

fn bspline(k: usize) -> Basis {
    Basis::BSpline(BSplineGrid::new(k, 3, -2.0, 2.0).expect("valid grid"))
}

const FULL: KanOptions = KanOptions { base: true, bias: true };

/// Builds the layer into a fresh store, randomizes its weights and checks
/// `probe(layer(x))` with respect to `x` and every parameter.
fn layer_case<L, B, F>(kind: &str, name: String, seed: u64, input: Vec<usize>, build: B, forward: F) -> CheckCase
where
    L: Send + Sync + 'static,
    B: Fn(&mut ParamStore<f64>) -> Result<L> + Send + Sync + 'static,
    F: Fn(&L, &mut Graph<'_, f64>, Var) -> Result<Var> + Send + Sync + 'static,
{
    CheckCase::new(kind, name, move || {
        let mut store = ParamStore::new(seed);
        let layer = build(&mut store)?;
        randomize(&mut store, seed);
        let mut inputs = vec![Tensor::randn(&input, 1.0, &mut rng(seed + 77))];
        check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
            let y = forward(&layer, g, v[0])?;
            probe_loss(g, y, seed)
        })
    })
}

fn toy_model() -> MedKanConfig {
    MedKanConfig {
        input_size: 8,
        in_channels: 2,
        num_classes: 3,
        stem_strides: [2, 1],
        stages: vec![StageSpec {
            dim: 8,
            num_lik: 1,
            num_gik: 1,
            groups: 2,
            downsample: false,
        }],
        sffn_ratio: 2,
        grid: GridConfig {
            num_basis: 4,
            ..GridConfig::default()
        },
        ..MedKanConfig::default()
    }
}

/// Every gradient check of the network's layer kinds, in f64.
pub fn registered_checks() -> Vec<CheckCase> {
    let mut cases = Vec::new();

    for (label, basis) in [("rbf", rbf(5)), ("bspline", bspline(5))] {
        cases.push(layer_case(
            "KANLinear",
            format!("kan_linear/{label}"),
            1,
            vec![4, 5],
            move |s| Ok(KanLinear::new(s, "kan", 5, 3, basis.clone(), FULL)),
            |l, g, x| l.forward(g, x),
        ));
    }

    for (groups, stride, label, basis) in [
        (1, 1, "rbf", rbf(4)),
        (2, 1, "rbf", rbf(4)),
        (4, 1, "rbf", rbf(4)),
        (2, 2, "rbf", rbf(4)),
        (2, 1, "bspline", bspline(4)),
    ] {
        cases.push(layer_case(
            "KANConv2d",
            format!("kan_conv2d/g{groups}/s{stride}/{label}"),
            10 + groups as u64 + stride as u64,
            vec![2, 4, 5, 5],
            move |s| KanConv2d::new(s, "kconv", 4, 4, 3, stride, 1, groups, basis.clone(), FULL),
            |l, g, x| l.forward(g, x),
        ));
    }

    cases.push(layer_case(
        "LGCK",
        "lgck/kan".into(),
        21,
        vec![2, 4, 5, 5],
        |s| Lgck::new_kan(s, "lgck", 4, 2, rbf(4), FULL),
        |l, g, x| l.forward(g, x),
    ));
    cases.push(layer_case(
        "LGCK",
        "lgck/plain".into(),
        22,
        vec![2, 4, 5, 5],
        |s| Lgck::new_plain(s, "lgck", 4, 2),
        |l, g, x| l.forward(g, x),
    ));

    cases.push(layer_case(
        "SFFN",
        "sffn".into(),
        31,
        vec![2, 4, 4, 4],
        |s| Ok(Sffn::new(s, "sffn", 4, 2)),
        |l, g, x| l.forward(g, x),
    ));

    cases.push(layer_case(
        "GIK",
        "gik/kan".into(),
        41,
        vec![2, 3, 3, 3],
        |s| Ok(Gik::new_kan(s, "gik", 3, 9, 2, &rbf(4), FULL, true)),
        |l, g, x| l.forward(g, x),
    ));
    cases.push(layer_case(
        "GIK",
        "gik/mlp".into(),
        42,
        vec![2, 3, 3, 3],
        |s| Ok(Gik::new_mlp(s, "gik", 3, 9, true)),
        |l, g, x| l.forward(g, x),
    ));

    cases.push(layer_case(
        "stem",
        "stem".into(),
        51,
        vec![2, 2, 8, 8],
        |s| Ok(Stem::new(s, "stem", 2, 3, 4, [2, 1])),
        |l, g, x| l.forward(g, x),
    ));

    cases.push(CheckCase::new("head", "head/pool-norm-linear-ce", || {
        let mut store = ParamStore::new(61);
        let norm = LayerNorm::new(&mut store, "head.norm", 6);
        let fc = Linear::new(&mut store, "head.fc", 6, 4);
        randomize(&mut store, 61);
        let mut inputs = vec![Tensor::randn(&[3, 6, 2, 2], 1.0, &mut rng(62))];
        let labels = [0, 3, 1];
        check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
            let pooled = g.mean_trailing(v[0], 2)?;
            let z = norm.forward(g, pooled)?;
            let logits = fc.forward(g, z)?;
            g.cross_entropy(logits, &labels)
        })
    }));

    cases.push(CheckCase::new("model", "medkan/toy", || {
        let (model, mut store) = MedKan::init::<f64>(&toy_model(), 7)?;
        let mut inputs = vec![Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng(71))];
        check(&mut store, &mut inputs, &CheckOptions::default(), |g, v| {
            let logits = model.forward(g, v[0])?;
            g.cross_entropy(logits, &[2, 0])
        })
    }));

    cases
}

/// Worst result over the cases of one layer kind.
#[derive(Clone, Debug, PartialEq)]
pub struct KindSummary {
    pub kind: String,
    pub cases: usize,
    pub checked: usize,
    pub worst_rel: f64,
    /// `<case>: <element>`
    pub worst_at: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub kinds: Vec<KindSummary>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(|k| k.worst_rel < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &KindSummary> {
        self.kinds.iter().filter(|k| !(k.worst_rel < self.tolerance))
    }
}

/// Runs `cases` and folds the outcomes per kind, keeping first-seen kind
/// order. A case that errors is reported with infinite error.
pub fn run_suite(cases: &[CheckCase], tolerance: f64) -> SuiteReport {
    let mut kinds: Vec<KindSummary> = Vec::new();
    for case in cases {
        let (rel, at, checked) = match case.run() {
            Ok(o) => (o.worst_rel, format!("{}: {}", case.name, o.worst_at), o.checked),
            Err(e) => (f64::INFINITY, format!("{}: {e}", case.name), 0),
        };
        let idx = match kinds.iter().position(|k| k.kind == case.kind) {
            Some(i) => i,
            None => {
                kinds.push(KindSummary {
                    kind: case.kind.clone(),
                    cases: 0,
                    checked: 0,
                    worst_rel: 0.0,
                    worst_at: format!("{}: -", case.name),
                });
                kinds.len() - 1
            }
        };
        let k = &mut kinds[idx];
        k.cases += 1;
        k.checked += checked;
        if rel > k.worst_rel || rel.is_nan() {
            k.worst_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            k.worst_at = at;
        }
    }
    SuiteReport { tolerance, kinds }
}
