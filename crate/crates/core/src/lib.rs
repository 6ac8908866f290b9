//! Sparse top-k routing over a multi-layer encoder feature bank.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense arrays, a reverse-mode tape and gradient checks
//! - [`fusion`]: feature bank, routing, aggregation and injection variants
//! - [`synthbench`]: synthetic multi-layer encoder with planted per-task
//!   layer preferences, a toy downstream backbone and metrics
//! - [`trainer`]: AdamW, warmup + cosine schedule, training and evaluation
//! - [`artifacts`]: configs, checkpoints, routing dumps and result tables
//! - [`gradsuite`]: the finite-difference suites behind `georoute gradcheck`
//! - [`cli`]: the `georoute` command line

pub mod artifacts;
pub mod checksum;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod numerics;
pub mod synthbench;
pub mod trainer;

pub use error::{Error, Result};
