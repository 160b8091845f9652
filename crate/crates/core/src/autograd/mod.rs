//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is a flat tape: forward ops append nodes and values, backward
//! walks the tape in reverse and accumulates gradients. Convolutions run on
//! direct SIMD kernels ([`conv_kernel`]); [`adam`] owns parameters and their
//! optimizer state; [`gradcheck`] provides the central-difference harness the
//! test suite verifies every op against.

pub mod adam;
pub mod conv_kernel;
pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, ParamStore};
pub use tape::{Tape, ValId};

pub use tensor::Tensor;
