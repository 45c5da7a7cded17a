// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// slot loops index several parallel buffers at once
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod config;
pub mod constellation;
pub mod delay;
pub mod env;
pub mod error;
pub mod optimizer;
pub mod qmix;
pub mod scenario;
pub mod workload;

pub use error::{Error, Result};

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
