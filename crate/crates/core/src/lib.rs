//! Multi-task feature sharing and augmentation for joint semantic segmentation
//! and depth estimation.
//!
//! The crate is `no_std` (it needs `alloc`). It contains a small reverse-mode
//! tensor core ([`tape`], [`tensor`]), the cross-channel affinity block
//! ([`ccam`]), depth-aware augmentations ([`augment`]), the orthogonal weight
//! penalty ([`regularize`]), mean-teacher pieces ([`semisup`]), evaluation
//! metrics ([`diagnostics`]) and a synthetic-scene training harness
//! ([`harness`]). File formats and the command line live in `ccam-tools`.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod augment;
pub mod ccam;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod param;
pub mod real;
pub mod regularize;
pub mod rng;
pub mod semisup;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter, Role};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

#[cfg(test)]
pub(crate) mod testutil;
