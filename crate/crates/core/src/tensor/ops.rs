//! Differentiable primitives recorded on a [`Graph`].

use rayon::prelude::*;

use super::kernels::{self, PatchGeom};
use super::tape::{Backward, BackwardCx, Graph, Var};
use super::{numel_of, Element, Tensor};
use crate::error::{config_err, Error, Result};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Element>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::lit(0.5);
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

// ---------------------------------------------------------------------------
// elementwise

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryOp(BinaryKind);

impl<T: Element> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad();
        match self.0 {
            BinaryKind::Add => vec![Some(g.clone()), Some(g.clone())],
            BinaryKind::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            BinaryKind::Mul => vec![
                cx.needs_grad(0).then(|| zip_map(g, cx.input(1), |g, b| g * b)),
                cx.needs_grad(1).then(|| zip_map(g, cx.input(0), |g, a| g * a)),
            ],
        }
    }
}

#[derive(Clone, Copy)]
enum UnaryKind<T> {
    Neg,
    Exp,
    Log,
    Silu,
    Relu,
    Gelu,
    Scale(T),
    AddScalar(T),
}

struct UnaryOp<T>(UnaryKind<T>);

impl<T: Element> UnaryKind<T> {
    fn apply(self, x: T) -> T {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Silu => silu(x),
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Gelu => gelu(x),
            UnaryKind::Scale(s) => x * s,
            UnaryKind::AddScalar(s) => x + s,
        }
    }
}

impl<T: Element> Backward<T> for UnaryOp<T> {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Silu => "silu",
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar(_) => "add_scalar",
        }
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad();
        let x = cx.input(0);
        let dx = match self.0 {
            UnaryKind::Neg => g.map(|v| -v),
            UnaryKind::Exp => zip_map(g, cx.output(), |g, y| g * y),
            UnaryKind::Log => zip_map(g, x, |g, x| g / x),
            UnaryKind::Silu => zip_map(g, x, |g, x| g * silu_grad(x)),
            UnaryKind::Relu => zip_map(g, x, |g, x| if x > T::zero() { g } else { T::zero() }),
            UnaryKind::Gelu => zip_map(g, x, |g, x| g * gelu_grad(x)),
            UnaryKind::Scale(s) => g.map(|v| v * s),
            UnaryKind::AddScalar(_) => g.clone(),
        };
        vec![Some(dx)]
    }
}

// ---------------------------------------------------------------------------
// reductions and layout

struct SumOp {
    scale: f64,
}

impl<T: Element> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad().item() * T::lit(self.scale);
        vec![Some(Tensor::full(cx.input(0).shape(), g).reshaped_like(cx.input(0)))]
    }
}

impl<T: Element> Tensor<T> {
    fn reshaped_like(self, other: &Tensor<T>) -> Tensor<T> {
        Tensor::from_parts(other.shape().to_vec(), self.into_data())
    }
}

/// Mean over all axes from `axis` onward.
struct MeanTrailingOp {
    inner: usize,
}

impl<T: Element> Backward<T> for MeanTrailingOp {
    fn name(&self) -> &'static str {
        "mean_trailing"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad().data();
        let s = T::one() / T::lit(self.inner as f64);
        let mut dx = Vec::with_capacity(cx.input(0).numel());
        for &gv in g {
            dx.extend(std::iter::repeat(gv * s).take(self.inner));
        }
        vec![Some(Tensor::from_parts(cx.input(0).shape().to_vec(), dx))]
    }
}

struct ReshapeOp;

impl<T: Element> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(cx.grad().clone().reshaped_like(cx.input(0)))]
    }
}

struct PermuteOp {
    inverse: Vec<usize>,
}

impl<T: Element> Backward<T> for PermuteOp {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad();
        let (data, shape) = kernels::permute(g.data(), g.shape(), &self.inverse);
        vec![Some(Tensor::from_parts(shape, data))]
    }
}

/// `outer` / `axis` / `inner` decomposition of a shape around one axis.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
}

impl<T: Element> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad();
        let mut start = 0;
        self.extents
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let part = cx
                    .needs_grad(i)
                    .then(|| slice_raw(g, self.axis, start, len));
                start += len;
                part
            })
            .collect()
    }
}

fn slice_raw<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, ext, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

struct SliceOp {
    axis: usize,
    start: usize,
}

impl<T: Element> Backward<T> for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = cx.input(0);
        let g = cx.grad();
        let (outer, ext, inner) = split_axis(x.shape(), self.axis);
        let len = g.shape()[self.axis];
        let mut dx = vec![T::zero(); x.numel()];
        for o in 0..outer {
            let dst = (o * ext + self.start) * inner;
            let src = o * len * inner;
            dx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
        }
        vec![Some(Tensor::from_parts(x.shape().to_vec(), dx))]
    }
}

// ---------------------------------------------------------------------------
// channel-wise ops (axis 1)

struct AddBiasOp;

impl<T: Element> Backward<T> for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad();
        let (outer, c, inner) = split_axis(g.shape(), 1);
        let db = cx.needs_grad(1).then(|| {
            let mut db = vec![T::zero(); c];
            for o in 0..outer {
                for (ch, acc) in db.iter_mut().enumerate() {
                    let base = (o * c + ch) * inner;
                    *acc = *acc + g.data()[base..base + inner].iter().copied().sum::<T>();
                }
            }
            Tensor::from_parts(vec![c], db)
        });
        vec![Some(g.clone()), db]
    }
}

/// Layer normalization across the channel axis (axis 1) at every
/// batch/spatial position, with per-channel affine parameters.
struct LayerNormOp<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Element> Backward<T> for LayerNormOp<T> {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let g = cx.grad().data();
        let gamma = cx.input(1).data();
        let shape = cx.input(0).shape();
        let (outer, c, inner) = split_axis(shape, 1);
        let inv_c = T::one() / T::lit(c as f64);
        let mut dx = vec![T::zero(); g.len()];
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for o in 0..outer {
            for s in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + s;
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for ch in 0..c {
                    let i = idx(ch);
                    let d = g[i] * gamma[ch];
                    mean_d = mean_d + d;
                    mean_dx = mean_dx + d * self.xhat[i];
                    dgamma[ch] = dgamma[ch] + g[i] * self.xhat[i];
                    dbeta[ch] = dbeta[ch] + g[i];
                }
                mean_d = mean_d * inv_c;
                mean_dx = mean_dx * inv_c;
                let r = self.rstd[o * inner + s];
                for ch in 0..c {
                    let i = idx(ch);
                    let d = g[i] * gamma[ch];
                    dx[i] = r * (d - mean_d - self.xhat[i] * mean_dx);
                }
            }
        }
        vec![
            Some(Tensor::from_parts(shape.to_vec(), dx)),
            Some(Tensor::from_parts(vec![c], dgamma)),
            Some(Tensor::from_parts(vec![c], dbeta)),
        ]
    }
}

struct SoftmaxOp {
    axis: usize,
}

impl<T: Element> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let y = cx.output();
        let g = cx.grad();
        let (outer, c, inner) = split_axis(y.shape(), self.axis);
        let mut dx = vec![T::zero(); y.numel()];
        for o in 0..outer {
            for s in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + s;
                let dot: T = (0..c).map(|ch| g.data()[idx(ch)] * y.data()[idx(ch)]).sum();
                for ch in 0..c {
                    let i = idx(ch);
                    dx[i] = y.data()[i] * (g.data()[i] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
    }
}

// ---------------------------------------------------------------------------
// matmul

/// `a · b` or, with `b_transposed`, `a · bᵀ`.
struct MatmulOp {
    b_transposed: bool,
}

impl<T: Element> Backward<T> for MatmulOp {
    fn name(&self) -> &'static str {
        if self.b_transposed {
            "matmul_bt"
        } else {
            "matmul"
        }
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let a = cx.input(0);
        let b = cx.input(1);
        let g = cx.grad();
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = g.shape()[1];
        let da = cx.needs_grad(0).then(|| {
            let mut da = vec![T::zero(); m * k];
            if self.b_transposed {
                // b: n×k ; da = g · b
                kernels::gemm(m, n, k, g.data(), b.data(), &mut da);
            } else {
                // b: k×n ; da = g · bᵀ
                kernels::gemm_bt(m, n, k, g.data(), b.data(), &mut da);
            }
            Tensor::from_parts(vec![m, k], da)
        });
        let db = cx.needs_grad(1).then(|| {
            if self.b_transposed {
                // db (n×k) = gᵀ · a
                let mut db = vec![T::zero(); n * k];
                kernels::gemm_at(n, m, k, g.data(), a.data(), &mut db);
                Tensor::from_parts(vec![n, k], db)
            } else {
                // db (k×n) = aᵀ · g
                let mut db = vec![T::zero(); k * n];
                kernels::gemm_at(k, m, n, a.data(), g.data(), &mut db);
                Tensor::from_parts(vec![k, n], db)
            }
        });
        vec![da, db]
    }
}

// ---------------------------------------------------------------------------
// convolution

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            stride,
            pad,
        }
    }

    /// Output extent along one axis: `floor((n + 2·pad − k) / stride) + 1`.
    pub fn out_extent(&self, n: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(config_err("convolution stride must be >= 1"));
        }
        let padded = n + 2 * self.pad;
        if padded < k {
            return Err(config_err(format!(
                "kernel extent {k} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - k) / self.stride + 1)
    }

    /// Patch geometry for one group of `channels` input planes of `h×w`.
    pub fn patches(&self, channels: usize, h: usize, w: usize) -> Result<PatchGeom> {
        Ok(PatchGeom {
            channels,
            h,
            w,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
            out_h: self.out_extent(h, self.kh)?,
            out_w: self.out_extent(w, self.kw)?,
        })
    }
}

/// Validates `x[N×C×H×W]` against `groups` and returns the per-group patch
/// geometry.
pub(crate) fn grouped_geometry(
    x_shape: &[usize],
    out_ch: usize,
    geom: &Conv2dGeom,
    groups: usize,
) -> Result<PatchGeom> {
    if x_shape.len() != 4 {
        return Err(Error::InvalidShape {
            shape: x_shape.to_vec(),
            reason: "convolution expects N×C×H×W".into(),
        });
    }
    let c = x_shape[1];
    if groups == 0 || c % groups != 0 || out_ch % groups != 0 {
        return Err(config_err(format!(
            "channels {c} -> {out_ch} not divisible into {groups} groups"
        )));
    }
    geom.patches(c / groups, x_shape[2], x_shape[3])
}

struct Conv2dOp {
    geom: PatchGeom,
    groups: usize,
}

impl<T: Element> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let x = cx.input(0);
        let w = cx.input(1);
        let g = cx.grad();
        let pg = &self.geom;
        let n = x.shape()[0];
        let o = w.shape()[0];
        let og = o / self.groups;
        let (rows, l) = (pg.rows(), pg.cols());
        let in_sample = x.numel() / n;
        let group_in = pg.channels * pg.h * pg.w;

        let need_x = cx.needs_grad(0);
        let need_w = cx.needs_grad(1);
        // per-sample (dx, dw) so the weight reduction below runs in a fixed order
        let parts: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|s| {
                let xs = &x.data()[s * in_sample..(s + 1) * in_sample];
                let gs = &g.data()[s * o * l..(s + 1) * o * l];
                let mut dx = if need_x { vec![T::zero(); in_sample] } else { Vec::new() };
                let mut dw = if need_w { vec![T::zero(); w.numel()] } else { Vec::new() };
                let mut cols = vec![T::zero(); rows * l];
                for gi in 0..self.groups {
                    let wg = &w.data()[gi * og * rows..(gi + 1) * og * rows];
                    let gg = &gs[gi * og * l..(gi + 1) * og * l];
                    if need_w {
                        kernels::im2col(&xs[gi * group_in..(gi + 1) * group_in], pg, &mut cols);
                        kernels::gemm_bt(
                            og,
                            l,
                            rows,
                            gg,
                            &cols,
                            &mut dw[gi * og * rows..(gi + 1) * og * rows],
                        );
                    }
                    if need_x {
                        kernels::gemm_at(rows, og, l, wg, gg, &mut cols);
                        kernels::col2im(&cols, pg, &mut dx[gi * group_in..(gi + 1) * group_in]);
                    }
                }
                (dx, dw)
            })
            .collect();

        let dx = need_x.then(|| {
            let mut dx = Vec::with_capacity(x.numel());
            for (p, _) in &parts {
                dx.extend_from_slice(p);
            }
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dw = need_w.then(|| {
            let mut acc = vec![T::zero(); w.numel()];
            for (_, p) in &parts {
                for (a, &v) in acc.iter_mut().zip(p) {
                    *a = *a + v;
                }
            }
            Tensor::from_parts(w.shape().to_vec(), acc)
        });
        vec![dx, dw]
    }
}

// ---------------------------------------------------------------------------
// public surface

impl<'p, T: Element> Graph<'p, T> {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = <BinaryOp as Backward<T>>::name(&BinaryOp(kind));
        same_shape(name, av.shape(), bv.shape())?;
        let out = match kind {
            BinaryKind::Add => zip_map(av, bv, |x, y| x + y),
            BinaryKind::Sub => zip_map(av, bv, |x, y| x - y),
            BinaryKind::Mul => zip_map(av, bv, |x, y| x * y),
        };
        Ok(self.push(out, &[a, b], Box::new(BinaryOp(kind))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind<T>, x: Var) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, &[x], Box::new(UnaryOp(kind)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(UnaryKind::Scale(s), x)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(UnaryKind::AddScalar(s), x)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 }))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel() as f64;
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(n);
        self.push(Tensor::scalar(s), &[x], Box::new(SumOp { scale: 1.0 / n }))
    }

    /// Mean over every axis from `axis` to the last; e.g. global average
    /// pooling of `N×C×H×W` with `axis = 2` gives `N×C`.
    pub fn mean_trailing(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis == 0 || axis >= v.rank() {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: format!("mean_trailing axis {axis} out of range"),
            });
        }
        let inner = numel_of(&v.shape()[axis..]);
        let scale = T::one() / T::lit(inner as f64);
        let out: Vec<T> = v
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let t = Tensor::from_parts(v.shape()[..axis].to_vec(), out);
        Ok(self.push(t, &[x], Box::new(MeanTrailingOp { inner })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, &[x], Box::new(ReshapeOp)))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: format!("invalid permutation {perm:?}"),
            });
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(Tensor::from_parts(shape, data), &[x], Box::new(PermuteOp { inverse })))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| config_err("concat of nothing"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidShape {
                shape: first.shape().to_vec(),
                reason: format!("concat axis {axis} out of range"),
            });
        }
        let base = first.shape().to_vec();
        let mut extents = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == rank
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            xs,
            Box::new(ConcatOp { axis, extents }),
        ))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(Error::InvalidShape {
                shape: v.shape().to_vec(),
                reason: format!("slice {start}..{} on axis {axis}", start + len),
            });
        }
        let t = slice_raw(v, axis, start, len);
        Ok(self.push(t, &[x], Box::new(SliceOp { axis, start })))
    }

    /// Adds `b[C]` along axis 1 of `x[N×C×...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.rank() < 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (_, c, inner) = split_axis(xv.shape(), 1);
        let bd = bv.data();
        let out: Vec<T> = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, &[x, b], Box::new(AddBiasOp)))
    }

    /// Normalizes across axis 1 at every other index, then applies
    /// `gamma[C]`, `beta[C]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() < 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "layer_norm needs a channel axis".into(),
            });
        }
        let (outer, c, inner) = split_axis(xv.shape(), 1);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![c],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = xv.data();
        let inv_c = T::one() / T::lit(c as f64);
        let eps = T::lit(eps);
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for s in 0..inner {
                let idx = |ch: usize| (o * c + ch) * inner + s;
                let mean = (0..c).map(|ch| d[idx(ch)]).sum::<T>() * inv_c;
                let var = (0..c)
                    .map(|ch| {
                        let t = d[idx(ch)] - mean;
                        t * t
                    })
                    .sum::<T>()
                    * inv_c;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + s] = r;
                for ch in 0..c {
                    let i = idx(ch);
                    xhat[i] = (d[i] - mean) * r;
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.push(t, &[x, gamma, beta], Box::new(LayerNormOp { xhat, rstd })))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let t = softmax_raw(xv, axis);
        Ok(self.push(t, &[x], Box::new(SoftmaxOp { axis })))
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, av.data(), bv.data(), &mut c);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            &[a, b],
            Box::new(MatmulOp { b_transposed: false }),
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a dense layer with weight `out×in`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut c = vec![T::zero(); m * n];
        kernels::gemm_bt(m, k, n, av.data(), bv.data(), &mut c);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], c),
            &[a, b],
            Box::new(MatmulOp { b_transposed: true }),
        ))
    }

    /// Grouped 2-D cross-correlation via im2col + matmul.
    ///
    /// `x[N×C×H×W]`, `w[O×(C/g)×kh×kw]`, optional `bias[O]`. Group `i` maps
    /// input channels `i·C/g..(i+1)·C/g` to output channels
    /// `i·O/g..(i+1)·O/g`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: Conv2dGeom,
        groups: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: wv.shape().to_vec(),
                reason: "conv weight must be O×(C/g)×kh×kw".into(),
            });
        }
        let o = wv.shape()[0];
        let pg = grouped_geometry(xv.shape(), o, &geom, groups)?;
        if wv.shape()[1..] != [pg.channels, geom.kh, geom.kw] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let n = xv.shape()[0];
        let og = o / groups;
        let (rows, l) = (pg.rows(), pg.cols());
        let in_sample = xv.numel() / n;
        let group_in = pg.channels * pg.h * pg.w;
        let mut out = vec![T::zero(); n * o * l];
        out.par_chunks_mut(o * l).enumerate().for_each(|(s, ys)| {
            let xs = &xv.data()[s * in_sample..(s + 1) * in_sample];
            let mut cols = vec![T::zero(); rows * l];
            for gi in 0..groups {
                kernels::im2col(&xs[gi * group_in..(gi + 1) * group_in], &pg, &mut cols);
                kernels::gemm(
                    og,
                    rows,
                    l,
                    &wv.data()[gi * og * rows..(gi + 1) * og * rows],
                    &cols,
                    &mut ys[gi * og * l..(gi + 1) * og * l],
                );
            }
        });
        let t = Tensor::from_parts(vec![n, o, pg.out_h, pg.out_w], out);
        let y = self.push(t, &[x, w], Box::new(Conv2dOp { geom: pg, groups }));
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}

pub(crate) fn softmax_raw<T: Element>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, c, inner) = split_axis(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for s in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + s;
            let m = (0..c).map(|ch| d[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (d[idx(ch)] - m).exp();
                out[idx(ch)] = e;
                z = z + e;
            }
            for ch in 0..c {
                out[idx(ch)] = out[idx(ch)] / z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
