//! Building blocks of the network. Every block maps `N×C×H×W` features to
//! features; all but the stem and patch embedding preserve the shape.

use super::layers::{Conv2d, LayerNorm, Linear};
use crate::error::{config_err, Result};
use crate::kan::{Basis, KanConv2d, KanLinear, KanOptions};
use crate::tensor::{Element, Graph, ParamSink, Var};

/// Two 3×3 convolutions, each followed by LayerNorm and SiLU.
#[derive(Clone, Debug)]
pub struct Stem {
    conv1: Conv2d,
    norm1: LayerNorm,
    conv2: Conv2d,
    norm2: LayerNorm,
}

impl Stem {
    pub fn new(
        sink: &mut impl ParamSink,
        name: &str,
        in_ch: usize,
        hidden: usize,
        out_ch: usize,
        strides: [usize; 2],
    ) -> Self {
        Self {
            conv1: Conv2d::new(sink, &format!("{name}.conv1"), in_ch, hidden, 3, strides[0], 1, 1, true),
            norm1: LayerNorm::new(sink, &format!("{name}.norm1"), hidden),
            conv2: Conv2d::new(sink, &format!("{name}.conv2"), hidden, out_ch, 3, strides[1], 1, 1, true),
            norm2: LayerNorm::new(sink, &format!("{name}.norm2"), out_ch),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let x = self.conv1.forward(g, x)?;
        let x = self.norm1.forward(g, x)?;
        let x = g.silu(x);
        let x = self.conv2.forward(g, x)?;
        let x = self.norm2.forward(g, x)?;
        Ok(g.silu(x))
    }
}

/// 2×2 stride-2 convolution followed by LayerNorm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(sink: &mut impl ParamSink, name: &str, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv: Conv2d::new(sink, &format!("{name}.conv"), in_ch, out_ch, 2, 2, 0, 1, true),
            norm: LayerNorm::new(sink, &format!("{name}.norm"), out_ch),
        }
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        self.norm.forward(g, y)
    }
}

#[derive(Clone, Debug)]
enum LocalConv {
    Kan(KanConv2d),
    Plain(Conv2d),
}

/// `x + conv(LN(x))` with a grouped 3×3 KAN (or plain) convolution. The
/// grouped kernel computes each channel slice independently, which is the
/// concatenation of per-group convolutions.
#[derive(Clone, Debug)]
pub struct Lgck {
    norm: LayerNorm,
    conv: LocalConv,
}

impl Lgck {
    pub fn new_kan(
        sink: &mut impl ParamSink,
        name: &str,
        dim: usize,
        groups: usize,
        basis: Basis,
        opts: KanOptions,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            conv: LocalConv::Kan(KanConv2d::new(
                sink,
                &format!("{name}.kconv"),
                dim,
                dim,
                3,
                1,
                1,
                groups,
                basis,
                opts,
            )?),
        })
    }

    pub fn new_plain(sink: &mut impl ParamSink, name: &str, dim: usize, groups: usize) -> Result<Self> {
        if groups == 0 || dim % groups != 0 {
            return Err(config_err(format!("LGCK width {dim} is not divisible by {groups} groups")));
        }
        Ok(Self {
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            conv: LocalConv::Plain(Conv2d::new(sink, &format!("{name}.conv"), dim, dim, 3, 1, 1, groups, true)),
        })
    }

    pub fn kan_conv(&self) -> Option<&KanConv2d> {
        match &self.conv {
            LocalConv::Kan(c) => Some(c),
            LocalConv::Plain(_) => None,
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = match &self.conv {
            LocalConv::Kan(c) => c.forward(g, h)?,
            LocalConv::Plain(c) => c.forward(g, h)?,
        };
        g.add(x, h)
    }
}

/// `x + pw₂(silu(dw₃ₓ₃(silu(pw₁(LN(x))))))` with hidden width `ratio·d`.
#[derive(Clone, Debug)]
pub struct Sffn {
    norm: LayerNorm,
    expand: Conv2d,
    depthwise: Conv2d,
    project: Conv2d,
}

impl Sffn {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize, ratio: usize) -> Self {
        let hidden = dim * ratio;
        Self {
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            expand: Conv2d::new(sink, &format!("{name}.expand"), dim, hidden, 1, 1, 0, 1, true),
            depthwise: Conv2d::new(sink, &format!("{name}.dw"), hidden, hidden, 3, 1, 1, hidden, true),
            project: Conv2d::new(sink, &format!("{name}.project"), hidden, dim, 1, 1, 0, 1, true),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.expand.forward(g, h)?;
        let h = g.silu(h);
        let h = self.depthwise.forward(g, h)?;
        let h = g.silu(h);
        let h = self.project.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    Kan(Vec<KanLinear>),
    Mlp(Linear, Linear),
}

/// Token mixing over the flattened spatial grid: every channel row of
/// `LN(x)` reshaped to `(N·d)×(h·w)` passes through the same stack of
/// `hw → hw` layers, so each output position sees every input position.
#[derive(Clone, Debug)]
pub struct Gik {
    norm: LayerNorm,
    mixer: Mixer,
    tokens: usize,
    residual: bool,
}

impl Gik {
    #[allow(clippy::too_many_arguments)]
    pub fn new_kan(
        sink: &mut impl ParamSink,
        name: &str,
        dim: usize,
        tokens: usize,
        depth: usize,
        basis: &Basis,
        opts: KanOptions,
        residual: bool,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| KanLinear::new(sink, &format!("{name}.kan{i}"), tokens, tokens, basis.clone(), opts))
            .collect();
        Self {
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            mixer: Mixer::Kan(layers),
            tokens,
            residual,
        }
    }

    pub fn new_mlp(sink: &mut impl ParamSink, name: &str, dim: usize, tokens: usize, residual: bool) -> Self {
        Self {
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            mixer: Mixer::Mlp(
                Linear::new(sink, &format!("{name}.fc1"), tokens, tokens),
                Linear::new(sink, &format!("{name}.fc2"), tokens, tokens),
            ),
            tokens,
            residual,
        }
    }

    pub fn kan_layers(&self) -> &[KanLinear] {
        match &self.mixer {
            Mixer::Kan(l) => l,
            Mixer::Mlp(..) => &[],
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, d) = (shape[0], shape[1]);
        let hw = shape[2..].iter().product::<usize>();
        if hw != self.tokens {
            return Err(config_err(format!(
                "GIK built for {} tokens received a {}x{} map",
                self.tokens, shape[2], shape[3]
            )));
        }
        let h = self.norm.forward(g, x)?;
        let mut h = g.reshape(h, &[n * d, hw])?;
        match &self.mixer {
            Mixer::Kan(layers) => {
                for l in layers {
                    h = l.forward(g, h)?;
                }
            }
            Mixer::Mlp(fc1, fc2) => {
                h = fc1.forward(g, h)?;
                h = g.silu(h);
                h = fc2.forward(g, h)?;
            }
        }
        let h = g.reshape(h, &shape)?;
        if self.residual {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }
}

/// `relu(x + LN(conv(relu(LN(conv(x))))))` with bias-free 3×3 convs.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    norm1: LayerNorm,
    conv2: Conv2d,
    norm2: LayerNorm,
}

impl ResidualBlock {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize) -> Self {
        Self {
            conv1: Conv2d::new(sink, &format!("{name}.conv1"), dim, dim, 3, 1, 1, 1, false),
            norm1: LayerNorm::new(sink, &format!("{name}.norm1"), dim),
            conv2: Conv2d::new(sink, &format!("{name}.conv2"), dim, dim, 3, 1, 1, 1, false),
            norm2: LayerNorm::new(sink, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let y = g.add(x, h)?;
        Ok(g.relu(y))
    }
}

/// `x + pw₂(gelu(pw₁(LN(dw₇ₓ₇(x)))))` with a 4× inverted bottleneck.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    depthwise: Conv2d,
    norm: LayerNorm,
    expand: Conv2d,
    project: Conv2d,
}

impl ConvNextBlock {
    pub fn new(sink: &mut impl ParamSink, name: &str, dim: usize) -> Self {
        Self {
            depthwise: Conv2d::new(sink, &format!("{name}.dw"), dim, dim, 7, 1, 3, dim, true),
            norm: LayerNorm::new(sink, &format!("{name}.norm"), dim),
            expand: Conv2d::new(sink, &format!("{name}.expand"), dim, 4 * dim, 1, 1, 0, 1, true),
            project: Conv2d::new(sink, &format!("{name}.project"), 4 * dim, dim, 1, 1, 0, 1, true),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        let h = self.expand.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.project.forward(g, h)?;
        g.add(x, h)
    }
}
