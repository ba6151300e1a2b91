//! Numerical core for Bayesian-optimized deep ensembles of heteroscedastic
//! regression networks.
//!
//! Everything here is `no_std` + `alloc`: Sobol sampling, the GP surrogate and
//! noisy expected-improvement acquisition, the hyperparameter cube, the
//! dense-block network and its trainer, ensemble aggregation, the BO loop,
//! synthetic field data with noise injection, and scalar metrics. File
//! formats, the CLI and threading live in the `bode` crate.

#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod acquisition;
pub mod bench;
pub mod ensemble;
pub mod field;
pub mod gp;
pub mod hyperspace;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod quasirand;
pub mod rng;
