//! The MedKAN classifier.
//!
//! ```text
//! stem (2× conv3×3 + LN + SiLU)
//!   → stage₁ … stageₙ, each: [patch embed] → num_lik × LIK → num_gik × (GIK → SFFN)
//!   → global average pool → LN → linear
//! ```
//!
//! LIK is an LGCK block (`x + KanConv3×3_grouped(LN x)`) followed by an SFFN
//! block. GIK mixes the `h·w` spatial positions of every channel with
//! stacked KAN layers.

mod blocks;
pub mod checkpoint;
mod config;
mod layers;
mod model;

pub use blocks::{ConvNextBlock, Gik, Lgck, PatchEmbed, ResidualBlock, Sffn, Stem};
pub use checkpoint::{Checkpoint, TensorSpan, TrainMeta, TrainState};
pub use config::{
    build_variant, Geometry, GlobalMixerKind, LocalBlockKind, MedKanConfig, StageSpec, Variant,
};
pub use layers::{Conv2d, LayerNorm, Linear};
pub use model::{LocalSlot, MedKan, Stage};
