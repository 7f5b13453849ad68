//! Sparsity-constrained color image super-resolution.
//!
//! Low-resolution RGB patches are coded jointly over three per-channel
//! dictionaries, with a quadratic penalty that pulls the high-pass edges of
//! the reconstructed channels towards each other. The same penalty is used
//! when learning the high-resolution dictionaries, whose update is solved
//! with ADMM.
//!
//! Module map:
//!
//! * [`image`]: planar images, color conversion, bicubic resampling,
//!   gradient features and overlapping patch grids.
//! * [`operators`]: edge operators, channel shifts, block-diagonal
//!   dictionaries and the joint quadratic objective.
//! * [`solver`]: FISTA for `xᵀQx − bᵀx + λ‖x‖₁` plus an exhaustive oracle.
//! * [`dictionary`]: joint color dictionary learning and the dictionary file
//!   format.
//! * [`pipeline`]: color-variance driven τ, super-resolution and training
//!   pair generation.
//! * [`metrics`]: PSNR, SSIM and S-CIELAB.
//! * [`cli`]: the `mccsr` command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dictionary;
pub mod error;
pub mod image;
pub mod metrics;
pub mod operators;
pub mod pipeline;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
