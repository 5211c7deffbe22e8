pub mod audio;
pub mod autograd;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod text;
pub mod training;
pub mod unet;

pub use error::{Error, Result};
