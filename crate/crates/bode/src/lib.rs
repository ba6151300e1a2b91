//! File formats, parallel execution and command pipelines on top of
//! `bode-core`.

pub use bode_core as core;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod parallel;
pub mod pipeline;
pub mod report;
