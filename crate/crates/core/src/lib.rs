//! Masked-diffusion pretraining of a modality-shared transformer encoder over
//! paired image cubes, followed by few-shot classification through
//! contrastive alignment with class-prompt text.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use config::RunConfig;
pub use error::{Error, Result};
