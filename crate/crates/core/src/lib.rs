//! Flow-aligned feature pyramid segmentation on a from-scratch autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`kernels`]: dense `f64` tensors and reverse-mode AD;
//! - [`warp`]: coordinate mapping and differentiable bilinear sampling;
//! - [`fam`]: the flow alignment module (predict a flow field, then warp);
//! - [`model`]: encoder, pyramid pooling head and aligned FPN decoder;
//! - [`train`], [`data`], [`metrics`], [`viz`]: the desk-scale pipeline.

pub mod ablation;
pub mod data;
pub mod error;
pub mod fam;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pnm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod warp;

pub use error::{Error, Result};
pub use tape::{Tape, Var, IGNORE_LABEL};
pub use tensor::{Shape, Tensor};
