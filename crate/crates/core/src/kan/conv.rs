use rayon::prelude::*;

use super::{Basis, KanOptions};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, PatchGeom};
use crate::tensor::{
    grouped_geometry, silu, silu_grad, Backward, BackwardCx, Conv2dGeom, Element, Graph, Init,
    ParamId, ParamSink, Tensor, Var,
};

/// Grouped KAN convolution.
///
/// `spline_weight[O × P × K]` and `base_weight[O × P]` with
/// `P = (C/g)·k·k`. Output channel `o` of group `i` sees only the input
/// channels of group `i`; each of its `P` patch taps is expanded over the
/// basis and weighted independently.
#[derive(Clone, Debug)]
pub struct KanConv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    basis: Basis,
    spline_weight: ParamId,
    base_weight: Option<ParamId>,
    bias: Option<ParamId>,
}

impl KanConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sink: &mut impl ParamSink,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        basis: Basis,
        opts: KanOptions,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "KanConv2d channels {in_ch} -> {out_ch} not divisible into {groups} groups"
            )));
        }
        let k = basis.num_basis();
        let fan_in = in_ch / groups * kernel * kernel;
        let spline_weight = sink.register(
            &format!("{name}.spline_weight"),
            &[out_ch, fan_in, k],
            Init::Normal(0.1 / ((fan_in * k) as f64).sqrt()),
        );
        let base_weight = opts.base.then(|| {
            sink.register(
                &format!("{name}.base_weight"),
                &[out_ch, fan_in],
                Init::Normal(1.0 / (fan_in as f64).sqrt()),
            )
        });
        let bias = opts
            .bias
            .then(|| sink.register(&format!("{name}.bias"), &[out_ch], Init::Zeros));
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            groups,
            basis,
            spline_weight,
            base_weight,
            bias,
        })
    }

    pub fn param_count(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
        num_basis: usize,
        opts: KanOptions,
    ) -> usize {
        let fan_in = in_ch / groups * kernel * kernel;
        out_ch * fan_in * (num_basis + usize::from(opts.base)) + if opts.bias { out_ch } else { 0 }
    }

    pub fn geom(&self) -> Conv2dGeom {
        Conv2dGeom::square(self.kernel, self.stride, self.pad)
    }

    pub fn in_ch(&self) -> usize {
        self.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.out_ch
    }

    pub fn groups(&self) -> usize {
        self.groups
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

    /// `x[N×C×H×W] → y[N×O×H'×W']`
    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 || g.shape(x)[1] != self.in_ch {
            return Err(Error::ShapeMismatch {
                op: "kan_conv2d",
                lhs: vec![0, self.in_ch, 0, 0],
                rhs: g.shape(x).to_vec(),
            });
        }
        let ws = g.param(self.spline_weight);
        let wb = self.base_weight.map(|id| g.param(id));
        let y = g.kan_conv2d(x, ws, wb, self.geom(), self.groups, &self.basis)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Basis features of one group's patch matrix: `phi[(p·K + k) × L]`, plus
/// derivatives when requested.
fn expand_cols<T: Element>(
    basis: &Basis,
    cols: &[T],
    l: usize,
    phi: &mut [T],
    mut dphi: Option<&mut [T]>,
) {
    let k = basis.num_basis();
    let mut v = vec![T::zero(); k];
    let mut d = vec![T::zero(); k];
    for (p, row) in cols.chunks(l).enumerate() {
        for (j, &x) in row.iter().enumerate() {
            match dphi.as_deref_mut() {
                Some(dphi) => {
                    basis.eval_with_deriv(x, &mut v, &mut d);
                    for kk in 0..k {
                        dphi[(p * k + kk) * l + j] = d[kk];
                    }
                }
                None => basis.eval(x, &mut v),
            }
            for kk in 0..k {
                phi[(p * k + kk) * l + j] = v[kk];
            }
        }
    }
}

struct KanConvOp {
    geom: PatchGeom,
    groups: usize,
    basis: Basis,
    has_base: bool,
}

impl KanConvOp {
    fn forward<T: Element>(&self, x: &Tensor<T>, ws: &Tensor<T>, wb: Option<&Tensor<T>>) -> Tensor<T> {
        let pg = &self.geom;
        let n = x.shape()[0];
        let o = ws.shape()[0];
        let og = o / self.groups;
        let (p, l) = (pg.rows(), pg.cols());
        let k = self.basis.num_basis();
        let in_sample = x.numel() / n;
        let group_in = pg.channels * pg.h * pg.w;
        let mut out = vec![T::zero(); n * o * l];
        out.par_chunks_mut(o * l).enumerate().for_each(|(s, ys)| {
            let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
            let mut cols = vec![T::zero(); p * l];
            let mut phi = vec![T::zero(); p * k * l];
            let mut tmp = vec![T::zero(); og * l];
            for gi in 0..self.groups {
                kernels::im2col(&xs[gi * group_in..(gi + 1) * group_in], pg, &mut cols);
                expand_cols(&self.basis, &cols, l, &mut phi, None);
                let yg = &mut ys[gi * og * l..(gi + 1) * og * l];
                kernels::gemm(og, p * k, l, &ws.data()[gi * og * p * k..(gi + 1) * og * p * k], &phi, yg);
                if let Some(wb) = wb {
                    cols.iter_mut().for_each(|v| *v = silu(*v));
                    kernels::gemm(og, p, l, &wb.data()[gi * og * p..(gi + 1) * og * p], &cols, &mut tmp);
                    for (a, &b) in yg.iter_mut().zip(&tmp) {
                        *a = *a + b;
                    }
                }
            }
        });
        Tensor::new(&[n, o, pg.out_h, pg.out_w], out).expect("shape")
    }
}

impl<T: Element> Backward<T> for KanConvOp {
    fn name(&self) -> &'static str {
        "kan_conv2d"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = cx.input(0);
        let ws = cx.input(1);
        let wb = self.has_base.then(|| cx.input(2));
        let gy = cx.grad();
        let pg = &self.geom;
        let n = x.shape()[0];
        let o = ws.shape()[0];
        let og = o / self.groups;
        let (p, l) = (pg.rows(), pg.cols());
        let k = self.basis.num_basis();
        let in_sample = x.numel() / n;
        let group_in = pg.channels * pg.h * pg.w;
        let need_x = cx.needs_grad(0);
        let need_ws = cx.needs_grad(1);
        let need_wb = self.has_base && cx.needs_grad(2);

        struct Part<T> {
            dx: Vec<T>,
            dws: Vec<T>,
            dwb: Vec<T>,
        }
        let parts: Vec<Part<T>> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
                let gs = &gy.data()[s * o * l..(s + 1) * o * l];
                let mut part = Part {
                    dx: if need_x { vec![T::zero(); in_sample] } else { Vec::new() },
                    dws: if need_ws { vec![T::zero(); ws.numel()] } else { Vec::new() },
                    dwb: if need_wb { vec![T::zero(); o * p] } else { Vec::new() },
                };
                let mut cols = vec![T::zero(); p * l];
                let mut phi = vec![T::zero(); p * k * l];
                let mut dphi = vec![T::zero(); if need_x { p * k * l } else { 0 }];
                let mut act = vec![T::zero(); if self.has_base { p * l } else { 0 }];
                let mut dfeat = vec![T::zero(); if need_x { p * k * l } else { 0 }];
                let mut dact = vec![T::zero(); if need_x && self.has_base { p * l } else { 0 }];
                for gi in 0..self.groups {
                    kernels::im2col(&xs[gi * group_in..(gi + 1) * group_in], pg, &mut cols);
                    expand_cols(
                        &self.basis,
                        &cols,
                        l,
                        &mut phi,
                        need_x.then_some(dphi.as_mut_slice()),
                    );
                    let gg = &gs[gi * og * l..(gi + 1) * og * l];
                    let wsg = &ws.data()[gi * og * p * k..(gi + 1) * og * p * k];
                    if need_ws {
                        let dst = &mut part.dws[gi * og * p * k..(gi + 1) * og * p * k];
                        kernels::gemm_bt(og, l, p * k, gg, &phi, dst);
                    }
                    if self.has_base {
                        for (a, &c) in act.iter_mut().zip(&cols) {
                            *a = silu(c);
                        }
                        if need_wb {
                            let dst = &mut part.dwb[gi * og * p..(gi + 1) * og * p];
                            kernels::gemm_bt(og, l, p, gg, &act, dst);
                        }
                    }
                    if need_x {
                        // d(features) = Wᵀ · dY, then chain through φ' and silu'
                        kernels::gemm_at(p * k, og, l, wsg, gg, &mut dfeat);
                        if let Some(wb) = wb {
                            let wbg = &wb.data()[gi * og * p..(gi + 1) * og * p];
                            kernels::gemm_at(p, og, l, wbg, gg, &mut dact);
                        }
                        // reuse `cols` as d(cols)
                        for pp in 0..p {
                            for j in 0..l {
                                let mut acc = T::zero();
                                for kk in 0..k {
                                    let r = (pp * k + kk) * l + j;
                                    acc = acc + dfeat[r] * dphi[r];
                                }
                                if self.has_base {
                                    let c = cols[pp * l + j];
                                    acc = acc + dact[pp * l + j] * silu_grad(c);
                                }
                                cols[pp * l + j] = acc;
                            }
                        }
                        kernels::col2im(&cols, pg, &mut part.dx[gi * group_in..(gi + 1) * group_in]);
                    }
                }
                part
            })
            .collect();

        let reduce = |pick: fn(&Part<T>) -> &Vec<T>, len: usize| {
            let mut acc = vec![T::zero(); len];
            for part in &parts {
                for (a, &v) in acc.iter_mut().zip(pick(part)) {
                    *a = *a + v;
                }
            }
            acc
        };
        let dx = need_x.then(|| {
            let mut dx = Vec::with_capacity(x.numel());
            for part in &parts {
                dx.extend_from_slice(&part.dx);
            }
            Tensor::new(x.shape(), dx).expect("shape")
        });
        let dws = need_ws
            .then(|| Tensor::new(ws.shape(), reduce(|p| &p.dws, ws.numel())).expect("shape"));
        let mut grads = vec![dx, dws];
        if self.has_base {
            let wb = wb.expect("base weight");
            grads.push(
                need_wb.then(|| Tensor::new(wb.shape(), reduce(|p| &p.dwb, wb.numel())).expect("shape")),
            );
        }
        grads
    }
}

impl<'p, T: Element> Graph<'p, T> {
    /// Grouped KAN convolution of `x[N×C×H×W]` with `spline_weight[O×P×K]`
    /// and optional `base_weight[O×P]`, `P = (C/g)·kh·kw`.
    pub fn kan_conv2d(
        &mut self,
        x: Var,
        spline_weight: Var,
        base_weight: Option<Var>,
        geom: Conv2dGeom,
        groups: usize,
        basis: &Basis,
    ) -> Result<Var> {
        let k = basis.num_basis();
        let ws = self.value(spline_weight);
        let o = ws.shape().first().copied().unwrap_or(0);
        let pg = grouped_geometry(self.shape(x), o, &geom, groups)?;
        let p = pg.rows();
        if ws.shape() != [o, p, k] {
            return Err(Error::ShapeMismatch {
                op: "kan_conv2d",
                lhs: vec![o, p, k],
                rhs: ws.shape().to_vec(),
            });
        }
        if let Some(wb) = base_weight {
            if self.shape(wb) != [o, p] {
                return Err(Error::ShapeMismatch {
                    op: "kan_conv2d",
                    lhs: vec![o, p],
                    rhs: self.shape(wb).to_vec(),
                });
            }
        }
        let op = KanConvOp {
            geom: pg,
            groups,
            basis: basis.clone(),
            has_base: base_weight.is_some(),
        };
        let y = op.forward(
            self.value(x),
            self.value(spline_weight),
            base_weight.map(|v| self.value(v)),
        );
        let mut inputs = vec![x, spline_weight];
        inputs.extend(base_weight);
        Ok(self.push(y, &inputs, Box::new(op)))
    }
}
