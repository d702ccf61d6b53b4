//! Kolmogorov-Arnold layers.
//!
//! Every edge `i → j` of a KAN layer carries its own learnable univariate
//! function, expanded over a fixed basis:
//!
//! ```text
//! y_j = Σ_i ( W_b[j,i]·silu(x_i) + Σ_k W_s[j,i,k]·φ_k(x_i) ) + b_j
//! ```
//!
//! [`KanLinear`] applies this to feature vectors; [`KanConv2d`] applies it
//! to every im2col patch, so each kernel tap of each input channel passes
//! through its own learnable activation before the sum.

mod basis;
mod conv;
mod linear;

use crate::error::{Error, Result};
use crate::tensor::{Backward, BackwardCx, Element, Graph, Tensor, Var};

pub use basis::{Basis, BasisKind, BSplineGrid, GridConfig, RbfGrid, MAX_SPLINE_FUNCS};
pub use conv::KanConv2d;
pub use linear::KanLinear;

/// Which optional parameter groups a KAN layer carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KanOptions {
    /// `W_b · silu(x)` residual branch.
    pub base: bool,
    pub bias: bool,
}

/// Evaluates the basis at every element: `x[...]` → `out[..., K]`.
pub fn basis_expand<T: Element>(basis: &Basis, x: &Tensor<T>) -> Tensor<T> {
    let k = basis.num_basis();
    let mut out = vec![T::zero(); x.numel() * k];
    for (chunk, &v) in out.chunks_mut(k).zip(x.data()) {
        basis.eval(v, chunk);
    }
    let mut shape = x.shape().to_vec();
    shape.push(k);
    Tensor::new(&shape, out).expect("shape")
}

struct BasisExpandOp {
    basis: Basis,
}

impl<T: Element> Backward<T> for BasisExpandOp {
    fn name(&self) -> &'static str {
        match self.basis {
            Basis::Rbf(_) => "rbf_expand",
            Basis::BSpline(_) => "bspline_expand",
        }
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = cx.input(0);
        let g = cx.grad().data();
        let k = self.basis.num_basis();
        let mut vals = vec![T::zero(); k];
        let mut ders = vec![T::zero(); k];
        let dx: Vec<T> = x
            .data()
            .iter()
            .zip(g.chunks(k))
            .map(|(&v, gk)| {
                self.basis.eval_with_deriv(v, &mut vals, &mut ders);
                gk.iter().zip(&ders).map(|(&a, &b)| a * b).sum()
            })
            .collect();
        vec![Some(Tensor::new(x.shape(), dx).expect("shape"))]
    }
}

impl<'p, T: Element> Graph<'p, T> {
    /// Differentiable [`basis_expand`].
    pub fn basis_expand(&mut self, x: Var, basis: &Basis) -> Var {
        let out = basis_expand(basis, self.value(x));
        self.push(out, &[x], Box::new(BasisExpandOp { basis: basis.clone() }))
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize, dim: usize, want: usize) -> Result<()> {
    if shape.len() != rank || shape[dim] != want {
        let mut expected = shape.to_vec();
        if expected.len() > dim {
            expected[dim] = want;
        }
        return Err(Error::ShapeMismatch {
            op,
            lhs: expected,
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}
