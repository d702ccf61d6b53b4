use crate::error::Result;
use crate::tensor::{Conv2dGeom, Element, Graph, Init, ParamId, ParamSink, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalization over the channel axis (axis 1) with affine `gamma, beta`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(sink: &mut impl ParamSink, name: &str, channels: usize) -> Self {
        Self {
            gamma: sink.register(&format!("{name}.gamma"), &[channels], Init::Ones),
            beta: sink.register(&format!("{name}.beta"), &[channels], Init::Zeros),
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// `x[N×in] → x·Wᵀ + b`
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(sink: &mut impl ParamSink, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: sink.register(&format!("{name}.weight"), &[out_dim, in_dim], Init::Uniform(bound)),
            bias: sink.register(&format!("{name}.bias"), &[out_dim], Init::Zeros),
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul_bt(x, w)?;
        g.add_bias(y, b)
    }
}

/// Square-kernel (grouped) convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: Option<ParamId>,
    geom: Conv2dGeom,
    groups: usize,
}

impl Conv2d {
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
        bias: bool,
    ) -> Self {
        let fan_in = in_ch / groups * kernel * kernel;
        let weight = sink.register(
            &format!("{name}.weight"),
            &[out_ch, in_ch / groups, kernel, kernel],
            Init::Normal((2.0 / fan_in as f64).sqrt()),
        );
        let bias = bias.then(|| sink.register(&format!("{name}.bias"), &[out_ch], Init::Zeros));
        Self {
            weight,
            bias,
            geom: Conv2dGeom::square(kernel, stride, pad),
            groups,
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize, groups: usize, bias: bool) -> usize {
        out_ch * (in_ch / groups) * kernel * kernel + if bias { out_ch } else { 0 }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom, self.groups)
    }
}
