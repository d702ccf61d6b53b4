//! MedKAN: a medical image classifier built from radial-basis
//! Kolmogorov-Arnold layers.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and the primitive kernels
//! - [`kan`]: basis functions, `KanLinear` and the grouped `KanConv2d`
//! - [`arch`]: LIK / GIK blocks, the staged network, variants and checkpoints
//! - [`train`]: loss, Adam, metrics, the training loop and Grad-CAM
//! - [`data`]: NPY/NPZ ingestion, preprocessing and synthetic datasets
//! - [`gradcheck`]: finite-difference verification of every layer kind

pub mod arch;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kan;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
