//! Core library for `dydit`: a small diffusion transformer whose width
//! (attention heads, MLP channel groups) is chosen per denoising timestep and
//! whose MLP work is chosen per spatial token.

pub mod analyze;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod flops;
pub mod numerics;
pub mod dataset;
pub mod imageio;
pub mod rng;
pub mod routing;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{DyError, Result};
pub use numerics::{GradientMap, Tape, Tensor};
