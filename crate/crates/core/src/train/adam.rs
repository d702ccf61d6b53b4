use serde::{Deserialize, Serialize};

use crate::arch::{TrainMeta, TrainState};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl<T: Element> TrainState<T> {
    /// Zero moments shaped like `params`.
    pub fn fresh(params: &[Tensor<T>], seed: u64) -> Self {
        Self {
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// One optimizer step over every parameter. A missing gradient counts as
/// zero (the parameter still decays and its moments still evolve).
///
/// ```text
/// g ← g + λθ
/// m ← β₁m + (1−β₁)g          v ← β₂v + (1−β₂)g²
/// θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
/// ```
pub fn adam_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Option<Tensor<T>>],
    state: &mut TrainState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(mismatch(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len(), state.v.len()],
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = &grads[i] {
            if g.shape() != p.shape() {
                return Err(mismatch("adam_step", p.shape(), g.shape()));
            }
        }
        for moment in [&state.m[i], &state.v[i]] {
            if moment.shape() != p.shape() {
                return Err(mismatch("adam_step", p.shape(), moment.shape()));
            }
        }
    }

    state.meta.step += 1;
    let t = state.meta.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().map(|g| g.data());
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let th = theta.as_f64();
            let gj = g.map_or(0.0, |g| g[j].as_f64()) + cfg.weight_decay * th;
            let mj = cfg.beta1 * m[j].as_f64() + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j].as_f64() + (1.0 - cfg.beta2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *theta = T::lit(th - update);
        }
    }
    Ok(())
}
