//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is deliberately small: one value type ([`Tensor`]), one
//! recording structure ([`Tape`]) and the dozen-and-a-half operations the
//! training recipe actually needs. All arithmetic is 64-bit; transcendental
//! functions go through `libm` so results do not depend on the host's libm.

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
