//! Debiased estimation of the global treatment effect (GTE) in creator-side
//! randomized experiments where treated and control items compete for
//! exposure inside the same consideration set.
//!
//! The crate is `no_std` and only needs `alloc`. It contains:
//!
//! * [`nnet`]: small dense ReLU networks with exact reverse-mode gradients
//!   and an Adam trainer, used for every nuisance function;
//! * [`simulator`]: the synthetic marketplace with persistent item-level
//!   treatment plus brute-force oracles for the GTE and the
//!   difference-in-means limits;
//! * [`choice`]: the multinomial-logit exposure model, its losses, score
//!   bundles and nuisance fitting;
//! * [`debiased`]: plug-in value, gradients, expected Hessians, the
//!   per-query influence value and the cross-fitted estimator;
//! * [`baselines`]: Horvitz-Thompson / Hajek DIM, IPW, AIPW and the
//!   pure-deep-learning benchmark.
//!
//! File formats, the Monte Carlo harness and the CLI live in the `gte` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod baselines;
pub mod choice;
pub mod debiased;
mod error;
pub mod linalg;
pub mod nnet;
pub mod rng;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
