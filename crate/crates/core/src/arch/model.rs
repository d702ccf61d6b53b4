use super::blocks::{ConvNextBlock, Gik, Lgck, PatchEmbed, ResidualBlock, Sffn, Stem};
use super::config::{GlobalMixerKind, LocalBlockKind, MedKanConfig};
use super::layers::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, ParamSink, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub enum LocalSlot {
    Lik(Lgck, Sffn),
    Residual(ResidualBlock),
    ConvNext(ConvNextBlock),
}

impl LocalSlot {
    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            LocalSlot::Lik(lgck, sffn) => {
                let y = lgck.forward(g, x)?;
                sffn.forward(g, y)
            }
            LocalSlot::Residual(b) => b.forward(g, x),
            LocalSlot::ConvNext(b) => b.forward(g, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: Option<PatchEmbed>,
    pub local: Vec<LocalSlot>,
    pub global: Vec<(Gik, Sffn)>,
}

impl Stage {
    fn forward<T: Element>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        if let Some(e) = &self.embed {
            x = e.forward(g, x)?;
        }
        for slot in &self.local {
            x = slot.forward(g, x)?;
        }
        for (gik, sffn) in &self.global {
            x = gik.forward(g, x)?;
            x = sffn.forward(g, x)?;
        }
        Ok(x)
    }
}

/// The full classifier: stem, stages, then pool → LN → linear head.
#[derive(Clone, Debug)]
pub struct MedKan {
    config: MedKanConfig,
    stem: Stem,
    stages: Vec<Stage>,
    head_norm: LayerNorm,
    head: Linear,
}

impl MedKan {
    pub fn new(sink: &mut impl ParamSink, config: &MedKanConfig) -> Result<Self> {
        let geo = config.validate()?;
        let basis = config.grid.build()?;
        let opts = config.kan_options();
        let d0 = config.stages[0].dim;
        let stem = Stem::new(
            sink,
            "stem",
            config.in_channels,
            config.stem_hidden(),
            d0,
            config.stem_strides,
        );
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = d0;
        for (i, (st, &side)) in config.stages.iter().zip(&geo.stages).enumerate() {
            let p = format!("stages.{i}");
            let d = st.dim;
            let embed = st
                .downsample
                .then(|| PatchEmbed::new(sink, &format!("{p}.embed"), prev, d));
            let mut local = Vec::with_capacity(st.num_lik);
            for j in 0..st.num_lik {
                let q = format!("{p}.local{j}");
                local.push(match config.local_block {
                    LocalBlockKind::KanConv => LocalSlot::Lik(
                        Lgck::new_kan(sink, &format!("{q}.lgck"), d, st.groups, basis.clone(), opts)?,
                        Sffn::new(sink, &format!("{q}.sffn"), d, config.sffn_ratio),
                    ),
                    LocalBlockKind::PlainConv => LocalSlot::Lik(
                        Lgck::new_plain(sink, &format!("{q}.lgck"), d, st.groups)?,
                        Sffn::new(sink, &format!("{q}.sffn"), d, config.sffn_ratio),
                    ),
                    LocalBlockKind::Residual => LocalSlot::Residual(ResidualBlock::new(sink, &q, d)),
                    LocalBlockKind::ConvNext => LocalSlot::ConvNext(ConvNextBlock::new(sink, &q, d)),
                });
            }
            let tokens = side * side;
            let mut global = Vec::new();
            if config.global_mixer != GlobalMixerKind::None {
                for j in 0..st.num_gik {
                    let q = format!("{p}.global{j}");
                    let gik = match config.global_mixer {
                        GlobalMixerKind::Kan => Gik::new_kan(
                            sink,
                            &format!("{q}.gik"),
                            d,
                            tokens,
                            config.gik_depth,
                            &basis,
                            opts,
                            config.gik_residual,
                        ),
                        _ => Gik::new_mlp(sink, &format!("{q}.gik"), d, tokens, config.gik_residual),
                    };
                    global.push((gik, Sffn::new(sink, &format!("{q}.sffn"), d, config.sffn_ratio)));
                }
            }
            stages.push(Stage { embed, local, global });
            prev = d;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            head_norm: LayerNorm::new(sink, "head.norm", prev),
            head: Linear::new(sink, "head.fc", prev, config.num_classes),
        })
    }

    /// Builds the model and a freshly initialized parameter store.
    pub fn init<T: Element>(config: &MedKanConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let model = Self::new(&mut store, config)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &MedKanConfig {
        &self.config
    }

    pub fn stem(&self) -> &Stem {
        &self.stem
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.input_size, c.input_size];
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::ShapeMismatch {
                op: "medkan_forward",
                lhs: [&[shape.first().copied().unwrap_or(1)][..], &want[..]].concat(),
                rhs: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Logits `N×num_classes` plus the output of every stage.
    pub fn forward_features<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(g.shape(x))?;
        let mut h = self.stem.forward(g, x)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = st.forward(g, h)?;
            feats.push(h);
        }
        let pooled = g.mean_trailing(h, 2)?;
        let z = self.head_norm.forward(g, pooled)?;
        let logits = self.head.forward(g, z)?;
        Ok((logits, feats))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_features(g, x)?.0)
    }

    /// Inference-only logits.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}
