//! Training kit for tiny convolutional networks built around in-situ
//! distillation from a channel-expanded weight-sharing teacher.
//!
//! The crate is self-contained: a reverse-mode autodiff engine over dense
//! `f64` tensors ([`autodiff`]), a small layer zoo ([`nn`]), the shared
//! teacher/student parameter store ([`supernet`]), the loss machinery
//! including gradient surgery and uncertainty-gated loss selection
//! ([`distill`]), the training loop ([`train`]), and dataset plumbing
//! ([`data`]).
//!
//! Everything here is `no_std + alloc` and free of platform float intrinsics
//! (transcendentals go through `libm`), so results are bit-reproducible
//! across hosts. File formats, checkpoints and the CLI live in the companion
//! `tinydistill-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod nn;
pub mod rng;
pub mod supernet;
pub mod train;

pub use autodiff::{Tape, Tensor, TensorId};
pub use error::{Error, Result};
