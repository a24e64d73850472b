//! Numerics for flow-matching and ReFlow on low-dimensional data.
//!
//! The crate is `no_std` (it needs `alloc`) and has no IO. It provides:
//!
//! - [`nn`]: a tensor-level reverse-mode tape, MLP denoisers with a sinusoidal
//!   time embedding, Adam and parameter EMA.
//! - [`losses`]: the generalized flow-matching objective (weight rules, time
//!   distributions, linear-map losses, the loss-normalization tracker).
//! - [`couplings`]: independent, ODE-simulated (backward/forward), projected and
//!   entropic mini-batch OT couplings, plus one ReFlow round.
//! - [`solvers`]: time grids, Euler/Heun/DPM-Solver integration, guidance and
//!   the local truncation-error probe.
//! - [`metrics`]: straightness, transport cost, energy distance and the
//!   posterior-mean oracle.
//! - [`precond`]: EDM-style preconditioning scalars for bridge interpolants.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod couplings;
pub mod data;
pub mod error;
pub mod losses;
pub(crate) mod math;
pub mod metrics;
pub mod nn;
pub mod precond;
pub mod rng;
pub mod solvers;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
