//! Token-UNet: 3D residual segmentation UNets whose bottleneck pools a fixed
//! number of learned semantic tokens, optionally runs them through a small
//! Transformer, and fuses them back onto the feature grid.
//!
//! The crate is self-contained: a dense tensor type with reverse-mode autodiff
//! ([`tape::Tape`]), the network building blocks ([`blocks`]), model assembly
//! and checkpointing ([`model`]), the training recipe ([`train`]), synthetic
//! volumetric data plus file I/O ([`data`]), and an analytic cost/benchmark
//! harness ([`bench`]).

pub mod alloc;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use shape::Shape;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
