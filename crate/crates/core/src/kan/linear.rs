use super::{expect_rank, Basis, KanOptions};
use crate::error::Result;
use crate::tensor::{Element, Graph, Init, ParamId, ParamSink, Var};

/// Dense KAN layer `in_dim → out_dim`.
///
/// Parameters: `spline_weight[out × in × K]`, optional
/// `base_weight[out × in]`, optional `bias[out]`.
#[derive(Clone, Debug)]
pub struct KanLinear {
    in_dim: usize,
    out_dim: usize,
    basis: Basis,
    spline_weight: ParamId,
    base_weight: Option<ParamId>,
    bias: Option<ParamId>,
}

impl KanLinear {
    pub fn new(
        sink: &mut impl ParamSink,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        basis: Basis,
        opts: KanOptions,
    ) -> Self {
        let k = basis.num_basis();
        let spline_std = 0.1 / ((in_dim * k) as f64).sqrt();
        let spline_weight = sink.register(
            &format!("{name}.spline_weight"),
            &[out_dim, in_dim, k],
            Init::Normal(spline_std),
        );
        let base_weight = opts.base.then(|| {
            sink.register(
                &format!("{name}.base_weight"),
                &[out_dim, in_dim],
                Init::Normal(1.0 / (in_dim as f64).sqrt()),
            )
        });
        let bias = opts
            .bias
            .then(|| sink.register(&format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self {
            in_dim,
            out_dim,
            basis,
            spline_weight,
            base_weight,
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn spline_weight(&self) -> ParamId {
        self.spline_weight
    }

    pub fn base_weight(&self) -> Option<ParamId> {
        self.base_weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// Closed-form learnable scalar count.
    pub fn param_count(in_dim: usize, out_dim: usize, num_basis: usize, opts: KanOptions) -> usize {
        let per_edge = num_basis + usize::from(opts.base);
        out_dim * in_dim * per_edge + if opts.bias { out_dim } else { 0 }
    }

    /// `x[N × in] → y[N × out]`
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        expect_rank("kan_linear", g.shape(x), 2, 1, self.in_dim)?;
        let n = g.shape(x)[0];
        let k = self.basis.num_basis();
        let phi = g.basis_expand(x, &self.basis);
        let phi = g.reshape(phi, &[n, self.in_dim * k])?;
        let ws = g.param(self.spline_weight);
        let ws = g.reshape(ws, &[self.out_dim, self.in_dim * k])?;
        let mut y = g.matmul_bt(phi, ws)?;
        if let Some(wb) = self.base_weight {
            let s = g.silu(x);
            let wb = g.param(wb);
            let yb = g.matmul_bt(s, wb)?;
            y = g.add(y, yb)?;
        }
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_bias(y, b)?;
        }
        Ok(y)
    }
}
