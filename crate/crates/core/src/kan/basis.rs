//! Univariate basis families used by the KAN layers.
//!
//! Gaussian RBF bumps are evaluated in closed form, one independent
//! expression per basis function. The B-spline family is evaluated with the
//! Cox–de Boor recursion and is kept as a baseline.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::tensor::Element;

/// Upper bound on `num_basis + degree` for B-spline grids (stack scratch).
pub const MAX_SPLINE_FUNCS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    #[default]
    Rbf,
    Bspline,
}

/// Serializable description of a basis grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub kind: BasisKind,
    pub num_basis: usize,
    pub lo: f64,
    pub hi: f64,
    /// RBF width; `None` uses the center spacing.
    pub sigma: Option<f64>,
    /// B-spline degree.
    pub degree: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            kind: BasisKind::Rbf,
            num_basis: 8,
            lo: -2.0,
            hi: 2.0,
            sigma: None,
            degree: 3,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<Basis> {
        match self.kind {
            BasisKind::Rbf => Ok(Basis::Rbf(RbfGrid::uniform(
                self.num_basis,
                self.lo,
                self.hi,
                self.sigma,
            )?)),
            BasisKind::Bspline => Ok(Basis::BSpline(BSplineGrid::new(
                self.num_basis,
                self.degree,
                self.lo,
                self.hi,
            )?)),
        }
    }
}

/// Gaussian bumps `exp(−(x − c_k)² / 2σ²)` with one shared width.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfGrid {
    centers: Vec<f64>,
    sigma: f64,
}

impl RbfGrid {
    /// Explicit centers (strictly increasing) and width.
    pub fn new(centers: Vec<f64>, sigma: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(config_err("RBF grid needs at least one center"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(config_err(format!("RBF sigma must be positive, got {sigma}")));
        }
        if centers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(config_err("RBF centers must be strictly increasing"));
        }
        Ok(Self { centers, sigma })
    }

    /// `k ≥ 2` centers evenly spaced on `[lo, hi]`; `sigma` defaults to the
    /// spacing.
    pub fn uniform(k: usize, lo: f64, hi: f64, sigma: Option<f64>) -> Result<Self> {
        if k < 2 {
            return Err(config_err(format!("uniform RBF grid needs K >= 2, got {k}")));
        }
        if !(hi > lo) {
            return Err(config_err(format!("empty grid range [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (k - 1) as f64;
        let centers = (0..k).map(|i| lo + step * i as f64).collect();
        Self::new(centers, sigma.unwrap_or(step))
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    #[inline]
    pub fn eval<T: Element>(&self, x: T, out: &mut [T]) {
        let a = T::lit(-0.5 / (self.sigma * self.sigma));
        for (o, &c) in out.iter_mut().zip(&self.centers) {
            let d = x - T::lit(c);
            *o = flush_tiny((a * d * d).exp());
        }
    }

    #[inline]
    pub fn eval_with_deriv<T: Element>(&self, x: T, out: &mut [T], dout: &mut [T]) {
        let a = T::lit(-0.5 / (self.sigma * self.sigma));
        let b = T::lit(-1.0 / (self.sigma * self.sigma));
        for ((o, d_o), &c) in out.iter_mut().zip(dout.iter_mut()).zip(&self.centers) {
            let d = x - T::lit(c);
            let v = flush_tiny((a * d * d).exp());
            *o = v;
            *d_o = b * d * v;
        }
    }
}

/// Far Gaussian tails underflow towards subnormals, which are both
/// numerically irrelevant and very slow to multiply on common CPUs.
#[inline]
fn flush_tiny<T: Element>(v: T) -> T {
    if v < T::min_positive_value() / T::epsilon() {
        T::zero()
    } else {
        v
    }
}

/// Degree-`p` B-splines on a uniform knot vector over `[lo, hi]`, extended
/// by `p` knots on each side so the `K = G + p` functions form a partition
/// of unity on the whole domain (`G` intervals).
///
/// Inputs are clamped to `[lo, hi]`; the derivative is zero outside.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineGrid {
    degree: usize,
    lo: f64,
    hi: f64,
    knots: Vec<f64>,
    num_basis: usize,
}

impl BSplineGrid {
    pub fn new(num_basis: usize, degree: usize, lo: f64, hi: f64) -> Result<Self> {
        if num_basis <= degree {
            return Err(config_err(format!(
                "B-spline of degree {degree} needs more than {degree} basis functions, got {num_basis}"
            )));
        }
        if num_basis + degree > MAX_SPLINE_FUNCS {
            return Err(config_err(format!(
                "B-spline grid too large: K + p = {} > {MAX_SPLINE_FUNCS}",
                num_basis + degree
            )));
        }
        if !(hi > lo) {
            return Err(config_err(format!("empty grid range [{lo}, {hi}]")));
        }
        let intervals = num_basis - degree;
        let h = (hi - lo) / intervals as f64;
        let knots = (0..=intervals + 2 * degree)
            .map(|i| lo + (i as f64 - degree as f64) * h)
            .collect();
        Ok(Self {
            degree,
            lo,
            hi,
            knots,
            num_basis,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Runs the recursion on the clamped input (which is returned) and
    /// leaves the degree-`p` values in `table[..K]`, or with
    /// `stop_before_last` the degree-`p−1` values in `table[..K+1]`.
    fn recurse<T: Element>(&self, x: T, stop_before_last: bool, table: &mut [T; MAX_SPLINE_FUNCS]) -> T {
        let lo = T::lit(self.lo);
        let hi = T::lit(self.hi);
        let x = x.max(lo).min(hi);
        let p = self.degree;
        let n0 = self.knots.len() - 1;
        let t = |i: usize| T::lit(self.knots[i]);

        // degree 0: indicator of the containing half-open span; x = hi
        // belongs to the last in-domain span
        let last_span = n0 - p - 1;
        for (i, v) in table.iter_mut().enumerate().take(n0) {
            let inside = if x == hi { i == last_span } else { t(i) <= x && x < t(i + 1) };
            *v = if inside { T::one() } else { T::zero() };
        }
        let top = if stop_before_last { p.saturating_sub(1) } else { p };
        for d in 1..=top {
            for i in 0..n0 - d {
                let left = (x - t(i)) / (t(i + d) - t(i)) * table[i];
                let right = (t(i + d + 1) - x) / (t(i + d + 1) - t(i + 1)) * table[i + 1];
                table[i] = left + right;
            }
        }
        x
    }

    pub fn eval<T: Element>(&self, x: T, out: &mut [T]) {
        let mut table = [T::zero(); MAX_SPLINE_FUNCS];
        self.recurse(x, false, &mut table);
        out[..self.num_basis].copy_from_slice(&table[..self.num_basis]);
    }

    pub fn eval_with_deriv<T: Element>(&self, x: T, out: &mut [T], dout: &mut [T]) {
        let p = self.degree;
        if p == 0 {
            self.eval(x, out);
            dout.iter_mut().for_each(|v| *v = T::zero());
            return;
        }
        let mut table = [T::zero(); MAX_SPLINE_FUNCS];
        let xc = self.recurse(x, true, &mut table);
        let t = |i: usize| T::lit(self.knots[i]);
        let pf = T::lit(p as f64);
        let outside = x < T::lit(self.lo) || x > T::lit(self.hi);
        for i in 0..self.num_basis {
            let a = pf / (t(i + p) - t(i)) * table[i];
            let b = pf / (t(i + p + 1) - t(i + 1)) * table[i + 1];
            dout[i] = if outside { T::zero() } else { a - b };
        }
        // raise degree p−1 → p for the values
        for i in 0..self.num_basis {
            let left = (xc - t(i)) / (t(i + p) - t(i)) * table[i];
            let right = (t(i + p + 1) - xc) / (t(i + p + 1) - t(i + 1)) * table[i + 1];
            out[i] = left + right;
        }
    }
}

/// A basis family with `K` functions.
#[derive(Clone, Debug, PartialEq)]
pub enum Basis {
    Rbf(RbfGrid),
    BSpline(BSplineGrid),
}

impl Basis {
    pub fn num_basis(&self) -> usize {
        match self {
            Basis::Rbf(g) => g.centers.len(),
            Basis::BSpline(g) => g.num_basis,
        }
    }

    pub fn kind(&self) -> BasisKind {
        match self {
            Basis::Rbf(_) => BasisKind::Rbf,
            Basis::BSpline(_) => BasisKind::Bspline,
        }
    }

    #[inline]
    pub fn eval<T: Element>(&self, x: T, out: &mut [T]) {
        match self {
            Basis::Rbf(g) => g.eval(x, out),
            Basis::BSpline(g) => g.eval(x, out),
        }
    }

    #[inline]
    pub fn eval_with_deriv<T: Element>(&self, x: T, out: &mut [T], dout: &mut [T]) {
        match self {
            Basis::Rbf(g) => g.eval_with_deriv(x, out, dout),
            Basis::BSpline(g) => g.eval_with_deriv(x, out, dout),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_peak_and_one_sigma() {
        let g = RbfGrid::new(vec![-1.0, 0.5, 2.0], 0.7).unwrap();
        let mut out = [0.0f64; 3];
        g.eval(0.5, &mut out);
        assert_eq!(out[1], 1.0);
        g.eval(0.5 + 0.7, &mut out);
        assert!((out[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((out[1] - 0.606531).abs() < 1e-6);
    }

    #[test]
    fn rbf_rejects_bad_sigma_and_centers() {
        assert!(RbfGrid::new(vec![0.0, 1.0], 0.0).is_err());
        assert!(RbfGrid::new(vec![0.0, 1.0], -1.0).is_err());
        assert!(RbfGrid::new(vec![1.0, 1.0], 1.0).is_err());
        assert!(RbfGrid::uniform(1, -1.0, 1.0, None).is_err());
    }

    #[test]
    fn default_grid_spacing() {
        let b = GridConfig::default().build().unwrap();
        let Basis::Rbf(g) = b else { panic!() };
        assert_eq!(g.centers().len(), 8);
        assert_eq!(g.centers()[0], -2.0);
        assert_eq!(g.centers()[7], 2.0);
        assert!((g.sigma() - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn bspline_degree_zero_is_span_indicator() {
        let g = BSplineGrid::new(4, 0, 0.0, 4.0).unwrap();
        let mut out = [0.0f64; 4];
        g.eval(2.5, &mut out);
        assert_eq!(out, [0.0, 0.0, 1.0, 0.0]);
        g.eval(4.0, &mut out);
        assert_eq!(out, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn bspline_needs_more_functions_than_degree() {
        assert!(BSplineGrid::new(3, 3, -1.0, 1.0).is_err());
        assert!(BSplineGrid::new(4, 3, -1.0, 1.0).is_ok());
    }
}
