//! Command-line front end: TOML configuration, raster and point-cloud I/O,
//! and the `upsample`, `benchmark` and `filter` commands.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "PLANAR_MRF_THREADS";
