//! Channel simulation, classical estimators, and a sensing-conditioned
//! diffusion denoiser for uplink channel estimation in cell-free ISAC networks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

mod binio;
pub mod carray;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod numerics;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};

/// Crate version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
