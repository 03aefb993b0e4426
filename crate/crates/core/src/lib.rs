pub mod backprojection;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod fem;
pub mod grid;
pub mod guidance;
pub mod materials;
pub mod microstructure;
pub mod rng;
pub mod sensitivity;

pub use error::{Error, Result};
