//! Locating cryptographic operations in power traces protected by a
//! random-delay countermeasure, and recovering keys from the result.
//!
//! The crate covers the full pipeline:
//!
//! * [`synth`] simulates a device executing instruction sequences under a
//!   random-delay countermeasure and emits power traces with ground truth.
//! * [`dataset`] cuts labeled windows (CO start / CO interior / noise) from
//!   synthesized traces into train/validation/test pools.
//! * [`autograd`] is a small reverse-mode tape engine (f64, CPU) with the
//!   layers the classifier needs; [`model`] builds and trains the 1-D
//!   residual CNN on top of it.
//! * [`locator`] sweeps a trained classifier across a session trace and
//!   segments the score series into estimated CO start positions.
//! * [`cpa`] cuts trace rows at estimated starts and runs correlation power
//!   analysis against AES first-round S-box output to recover key bytes,
//!   which doubles as an end-to-end check of location accuracy.
//!
//! Everything is deterministic given the config seeds: fixed reduction
//! orders, per-purpose ChaCha8 substreams, and index-ordered parallel maps
//! (see [`parallel`]) keep results bit-identical across thread counts and
//! with the sequential fallback (`--no-default-features`).

pub mod autograd;
pub mod cpa;
pub mod dataset;
pub mod error;
pub mod locator;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
