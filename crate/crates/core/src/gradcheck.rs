//! Central finite-difference verification of reverse-mode gradients.
//!
//! [`check`] compares the tape's gradient of a scalar loss against
//! `(L(θ+h) − L(θ−h)) / 2h` for every input element and every parameter
//! element (or a deterministic sample of them). [`suite`] registers one
//! check per layer kind of the network.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

mod suite;

pub use suite::{registered_checks, run_suite, CheckCase, KindSummary, SuiteReport, KINDS, SUITE_TOLERANCE};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Elements checked per tensor; `None` checks every element.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: FD_STEP,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub worst_rel: f64,
    /// `input[i][j]` or `<param name>[j]`
    pub worst_at: String,
    pub checked: usize,
}

impl CheckOutcome {
    fn record(&mut self, rel: f64, at: impl FnOnce() -> String) {
        self.checked += 1;
        if rel > self.worst_rel || rel.is_nan() {
            self.worst_rel = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst_at = at();
        }
    }
}

fn indices(n: usize, opts: &CheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_per_tensor {
        Some(m) if m < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut idx = sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    }
}

/// Checks `loss = f(graph, inputs)` with respect to every input and every
/// parameter in `store`.
///
/// `f` must build a rank-0 loss from the provided input vars (it may also
/// pull parameters from the graph).
pub fn check<F>(
    store: &mut ParamStore<f64>,
    inputs: &mut [Tensor<f64>],
    opts: &CheckOptions,
    f: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let (input_grads, param_grads) = {
        let mut g = Graph::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let grads = g.backward(loss)?;
        let ig: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs.iter())
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let pg: Vec<Tensor<f64>> = grads
            .into_param_grads()
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect();
        (ig, pg)
    };

    let h = opts.step;
    let mut out = CheckOutcome {
        worst_rel: 0.0,
        worst_at: String::new(),
        checked: 0,
    };

    for i in 0..inputs.len() {
        for j in indices(inputs[i].numel(), opts, i as u64 + 1) {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + h;
            let up = eval(store, inputs)?;
            inputs[i].data_mut()[j] = orig - h;
            let down = eval(store, inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = input_grads[i].data()[j];
            out.record(rel_err(analytic, numeric), || format!("input[{i}][{j}]"));
        }
    }

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        for j in indices(n, opts, 1_000 + id.0 as u64) {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = param_grads[id.0].data()[j];
            out.record(rel_err(analytic, numeric), || {
                format!("{}[{j}]", store.name(id))
            });
        }
    }
    Ok(out)
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r` in [-1, 1]; a loss whose
/// gradient exercises every output element with a distinct weight.
pub fn probe_loss(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}
