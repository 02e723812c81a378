//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! then walks the record in reverse and accumulates exact gradients into each
//! tracked node. Only the operations the networks and losses in this crate
//! need are provided: matrix product, a handful of elementwise maps, softmax,
//! gradient reversal, reductions, label picking and a clamped logarithm.
//!
//! A tape owns all of its nodes, so independent tapes share no state.

mod tape;
mod tensor;

pub use tape::{Elementwise, Tape, Var};
pub use tensor::Tensor;
