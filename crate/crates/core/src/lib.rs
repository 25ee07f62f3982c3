//! Gated vision transformer with learnable dimension-importance scores.
//!
//! The crate covers the numerical side of the train / prune / fine-tune loop:
//!
//! - [`tensor`] and [`graph`]: dense `f64` tensors and a tape-based reverse-mode
//!   differentiation engine.
//! - [`optim`]: AdamW with decoupled weight decay and a cosine learning-rate schedule.
//! - [`model`]: the pre-norm ViT with four gate sites per block.
//! - [`prune`]: global magnitude threshold, binarization, and structural slicing.
//! - [`cost`]: analytic parameter and multiply-accumulate accounting.
//! - [`data`] and [`train`]: a deterministic synthetic classification task and the
//!   training / evaluation loops.
//!
//! Everything here is `no_std` + `alloc`. The default `std` feature only enables
//! runtime CPU feature detection in the matrix-multiply kernel.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cost;
pub mod data;
mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{GateSite, Mode, ModelConfig, SitePosition, VitModel};
pub use tensor::Tensor;
