//! MonoDiffusion: self-supervised monocular depth estimation reformulated as
//! conditional iterative denoising, built desk-scale around a synthetic-scene
//! oracle so every geometric, stochastic and loss component can be verified
//! independently.

pub mod error;
pub mod tape;

pub use error::{Error, Result};
