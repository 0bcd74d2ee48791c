//! Reverse-diffusion denoiser: noise schedule, network, training, inference.

mod infer;
mod model;
mod schedule;
mod train;

pub use infer::*;
pub use model::*;
pub use schedule::*;
pub use train::*;
