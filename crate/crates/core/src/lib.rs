//! Core library for `memsearch`: a desk-scale study of how the choice of
//! fine-tuned parameter subsets in a conditional denoising diffusion model
//! trades off training-data memorization against generation quality.
//!
//! The crate is organised around one experiment pipeline:
//!
//! * [`diffusion`] — noise schedules, the forward corruption process and the
//!   deterministic reverse process of a DDPM.
//! * [`denoiser`] — a small residual conditional noise predictor with three
//!   PEFT delta families (spectral shifts, scale/bias shifts, per-unit weight
//!   deltas), hand-derived gradients and an Adam trainer that honours a
//!   binary parameter mask.
//! * [`corpus`] — synthetic captioned image corpora, the duplicated
//!   memorization subset and search-time subsampling.
//! * [`metrics`] — memorization and quality measurement: average minimum
//!   cosine distance, denoising-strength gap, Fréchet distance, a tile-wise
//!   extraction attack and a prompt-fidelity proxy.
//! * [`mitigation`] — training-time comparators: random word addition and
//!   threshold filtering.
//! * [`search`] — the NSGA-II outer loop over binary masks, Pareto-front
//!   management and trial records.
//!
//! The crate is `no_std` + `alloc`: all operations are pure functions of
//! their inputs and seeds, so the whole pipeline is reproducible bit-for-bit.
//! IO, file formats and the CLI live in the companion `memsearch` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
mod linalg;
pub mod metrics;
pub mod mitigation;
pub mod rng;
pub mod search;

pub(crate) mod math;

pub use error::Error;
pub use linalg::Matrix;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
