//! Speaker encoder, adversarial attacks and defenses on synthetic speech.

pub mod advtrain;
pub mod attacks;
pub mod audio;
pub mod checkpoint;
pub mod defense;
pub mod detector;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod metrics;
pub mod params;
pub mod rng;
pub mod synth;

pub use error::{CoreError, Result};
