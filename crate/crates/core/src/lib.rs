//! Score-entropy discrete diffusion on characters: forward noise process,
//! score models, training, samplers, an enumeration oracle and evaluation.

pub mod bench;
pub mod check;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod noise;
pub mod oracle;
pub mod sample;
pub mod text;
pub mod train;

pub use error::{Error, Result};
