//! Differentiable optical-flow toolkit.
//!
//! A small dense-tensor engine with reverse-mode automatic differentiation,
//! plus the flow-specific layers built on top of it: correlation cost
//! volumes, adaptive cost-volume modulation, confidence-guided flow-field
//! deformation, a coarse-to-fine pyramid network, a toy training harness
//! and the usual flow benchmark metrics.
//!
//! The crate is `no_std` (with `alloc`); all file and terminal I/O lives in
//! the companion `flowlite` crate.

#![no_std]

extern crate alloc;

pub mod checkpoint;
pub mod cost_volume;
pub mod deformation;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod modulation;
pub mod network;
pub mod rng;
pub mod shape;
pub mod tensor;
pub mod training;

mod conv;
mod warp;

pub use conv::{conv2d, ConvParams, ConvStack};
pub use error::{Error, Result};
pub use shape::Shape;
pub use tensor::Tensor;
pub use warp::{grid_sample, upsample2x, Padding};
