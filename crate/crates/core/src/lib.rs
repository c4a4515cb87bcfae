//! High-resolution windowed-attention transformer backbone, desk scale.
//!
//! The crate provides:
//!
//! - a minimal dense `f64` tensor with reverse-mode differentiation
//!   ([`tape`]),
//! - local-window multi-head self-attention with relative position bias
//!   ([`window`]), the depth-wise-conv feed-forward block ([`ffn`]), and
//!   their composition ([`block`]),
//! - the full multi-resolution parallel network with task heads
//!   ([`model`], [`heads`]),
//! - a static parameter/FLOP analyzer ([`analyzer`]), gradient checking
//!   ([`gradcheck`]), and a toy SGD trainer on synthetic tasks ([`train`]).
//!
//! `no_std` + `alloc`; all transcendental math goes through `libm` and all
//! randomness through one seeded generator, so results are bit-reproducible.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analyzer;
pub mod block;
pub mod config;
pub mod dump;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod heads;
pub mod kernels;
pub mod layers;
pub mod mathx;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
